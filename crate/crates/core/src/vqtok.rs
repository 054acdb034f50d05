//! Multi-channel spectrogram VQ tokenizer: convolutional encoder over the
//! joint montage, nearest-neighbour codebook, transposed-conv decoder and a
//! PatchGAN critic trained with the hinge loss.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use clef_grad::{Adam, AdamConfig, Checkpoint, CheckpointMeta, Graph, ParamId, Real, Tensor, Var, TABLE_PARAMS};
use rand::seq::SliceRandom;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::dsp::Spectrogram;
use crate::error::{data, io_err, CoreError, Result};
use crate::nn::{Conv, ResBlock, Store, G};
use crate::profile::{hex, Profile, TokenizerConfig};
use crate::rng::{stage_rng, StageRng};

/// Snapshot of the codebook: `entries[k * d + j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub k: usize,
    pub d: usize,
    pub entries: Vec<f32>,
    pub usage_counts: Vec<u64>,
}

impl Codebook {
    pub fn new(k: usize, d: usize, entries: Vec<f32>) -> Result<Self> {
        if k < 2 || entries.len() != k * d {
            return data(format!("codebook needs K >= 2 and {k}x{d} entries, got {}", entries.len()));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Numeric("codebook".into()));
        }
        Ok(Self {
            k,
            d,
            entries,
            usage_counts: vec![0; k],
        })
    }

    pub fn entry(&self, k: usize) -> &[f32] {
        &self.entries[k * self.d..(k + 1) * self.d]
    }

    /// Hex SHA-256 of the entry bytes.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.k as u32).to_le_bytes());
        h.update((self.d as u32).to_le_bytes());
        for v in &self.entries {
            h.update(v.to_le_bytes());
        }
        hex(&h.finalize())
    }

    pub fn used_fraction(&self) -> f64 {
        self.usage_counts.iter().filter(|&&c| c > 0).count() as f64 / self.k as f64
    }
}

/// Index of the nearest entry for each `d`-row of `latents`; ties go to the
/// lowest index.
pub fn nearest_codes(latents: &[f32], codebook: &Codebook) -> Vec<usize> {
    let d = codebook.d;
    latents
        .chunks(d)
        .map(|row| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for k in 0..codebook.k {
                let dist: f64 = row
                    .iter()
                    .zip(codebook.entry(k))
                    .map(|(&a, &b)| {
                        let t = a as f64 - b as f64;
                        t * t
                    })
                    .sum();
                if dist < best_d {
                    best_d = dist;
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Quantized latent grid: indices `[h * w]` and vectors `[d, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    pub h: usize,
    pub w: usize,
    pub indices: Vec<usize>,
    pub quantized: Vec<f32>,
}

/// Quantizes a `d×h×w` latent block.
pub fn quantize(latents: &[f32], h: usize, w: usize, codebook: &Codebook) -> Result<TokenGrid> {
    let d = codebook.d;
    if latents.len() != d * h * w {
        return data(format!("latent block of {} values is not {d}x{h}x{w}", latents.len()));
    }
    if latents.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::Numeric("latents".into()));
    }
    let n = h * w;
    let mut rows = vec![0f32; n * d];
    for j in 0..d {
        for i in 0..n {
            rows[i * d + j] = latents[j * n + i];
        }
    }
    let indices = nearest_codes(&rows, codebook);
    let mut quantized = vec![0f32; d * n];
    for (i, &k) in indices.iter().enumerate() {
        for (j, &v) in codebook.entry(k).iter().enumerate() {
            quantized[j * n + i] = v;
        }
    }
    Ok(TokenGrid { h, w, indices, quantized })
}

/// Channel-masking schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSchedule {
    pub p_psg: f64,
    pub p_drop: f64,
    pub ramp_steps: u64,
    pub psg_subset: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskDraw {
    pub keep: Vec<bool>,
    pub psg_restricted: bool,
}

const MASK_RESAMPLES: usize = 64;

impl MaskSchedule {
    pub fn from_profile(p: &Profile) -> Result<Self> {
        let s = Self {
            p_psg: p.tokenizer.p_psg,
            p_drop: p.tokenizer.p_drop,
            ramp_steps: p.tokenizer.mask_ramp_steps,
            psg_subset: p.psg_indices(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.p_psg) && (0.0..=1.0).contains(&self.p_drop) && self.ramp_steps >= 1;
        if ok {
            Ok(())
        } else {
            crate::error::config("mask probabilities must lie in [0, 1] and ramp_steps >= 1")
        }
    }

    /// Ramped `(p_psg, p_drop)` at `step`.
    pub fn effective(&self, step: u64) -> (f64, f64) {
        let r = (step as f64 / self.ramp_steps as f64).min(1.0);
        (self.p_psg * r, self.p_drop * r)
    }

    /// Draws the channels kept in the encoder input. Only `available`
    /// channels can be kept; at least one survives whenever any is available.
    pub fn sample(&self, step: u64, available: &[bool], rng: &mut StageRng) -> MaskDraw {
        let (p_psg, p_drop) = self.effective(step);
        let montage: Vec<usize> = (0..available.len()).filter(|&c| available[c]).collect();
        let mut fallback = None;
        for _ in 0..MASK_RESAMPLES {
            let restricted = rng.random::<f64>() < p_psg;
            let base: Vec<usize> = if restricted {
                montage.iter().copied().filter(|c| self.psg_subset.contains(c)).collect()
            } else {
                montage.clone()
            };
            let mut keep = vec![false; available.len()];
            let mut any = false;
            for &c in &base {
                if rng.random::<f64>() >= p_drop {
                    keep[c] = true;
                    any = true;
                }
            }
            if any {
                return MaskDraw { keep, psg_restricted: restricted };
            }
            if fallback.is_none() && !base.is_empty() {
                fallback = Some((base[0], restricted));
            }
        }
        let mut keep = vec![false; available.len()];
        let restricted = match fallback {
            Some((c, r)) => {
                keep[c] = true;
                r
            }
            None => {
                if let Some(&c) = montage.first() {
                    keep[c] = true;
                }
                false
            }
        };
        MaskDraw { keep, psg_restricted: restricted }
    }
}

/// Channel-balanced reconstruction loss on `[.., C, H, W]` tensors: L1 on
/// the channel mean plus `gamma` times L1 on per-channel deviations from it.
pub fn recon_loss<T: Real>(g: &mut Graph<T>, s: Var, s_hat: Var, gamma: f64) -> Result<Var> {
    if g.shape(s) != g.shape(s_hat) {
        return data(format!("recon_loss shapes {:?} and {:?}", g.shape(s), g.shape(s_hat)));
    }
    let axis = g.shape(s).len() - 3;
    let ms = g.mean_axis(s, axis, true)?;
    let mh = g.mean_axis(s_hat, axis, true)?;
    let mean_term = g.l1_loss(ms, mh)?;
    let ds = g.sub(s, ms)?;
    let dh = g.sub(s_hat, mh)?;
    let diff = g.l1_loss(ds, dh)?;
    let diff = g.scale(diff, gamma);
    Ok(g.add(mean_term, diff)?)
}

/// Hinge critic loss `E[relu(1 - D(real))] + E[relu(1 + D(fake))]`.
pub fn hinge_d_loss<T: Real>(g: &mut Graph<T>, d_real: Var, d_fake: Var) -> Result<Var> {
    let r = g.scale(d_real, -1.0);
    let r = g.add_scalar(r, 1.0);
    let r = g.relu(r);
    let r = g.mean_all(r);
    let f = g.add_scalar(d_fake, 1.0);
    let f = g.relu(f);
    let f = g.mean_all(f);
    Ok(g.add(r, f)?)
}

/// Generator adversarial loss `-E[D(fake)]`.
pub fn hinge_g_loss<T: Real>(g: &mut Graph<T>, d_fake: Var) -> Var {
    let m = g.mean_all(d_fake);
    g.scale(m, -1.0)
}

/// `‖∇rec‖ / (‖∇adv‖ + eps)` over `anchor`, clamped to `[0, max]`.
pub fn adaptive_adv_weight<T: Real>(g: &Graph<T>, rec: Var, adv: Var, anchor: &[Var], eps: f64, max: f64) -> Result<f64> {
    let nr = g.backward_wrt(rec, anchor)?.norm_over(anchor);
    let na = g.backward_wrt(adv, anchor)?.norm_over(anchor);
    let w = nr / (na + eps);
    if !w.is_finite() {
        return Err(CoreError::Numeric("adaptive adversarial weight".into()));
    }
    Ok(w.clamp(0.0, max))
}

fn down_kernel(stride: [usize; 2]) -> ((usize, usize), (usize, usize)) {
    let k = |s: usize| if s == 2 { (4, 1) } else { (3, 1) };
    let (kh, ph) = k(stride[0]);
    let (kw, pw) = k(stride[1]);
    ((kh, kw), (ph, pw))
}

#[derive(Clone, Debug)]
struct Level {
    res: ResBlock,
    resample: Option<Conv>,
}

/// Encoder, codebook and decoder sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    pub cfg: TokenizerConfig,
    pub channels: usize,
    pub bins: usize,
    pub store: Store,
    stem: Conv,
    enc: Vec<Level>,
    enc_out: Conv,
    pub codebook: ParamId,
    dec_in: Conv,
    dec: Vec<Level>,
    dec_out: Conv,
    /// Per-channel, per-frequency offset added to the decoder output.
    dec_bias: ParamId,
}

impl Tokenizer {
    pub fn new(profile: &Profile, rng: &mut StageRng) -> Self {
        let cfg = profile.tokenizer.clone();
        let c = profile.cohort.channels.len();
        let lc = &cfg.level_channels;
        let next = |i: usize| lc.get(i + 1).copied().unwrap_or(lc[i]);
        let mut store = Store::new();
        let stem = Conv::new(&mut store, "enc.stem", 2 * c, lc[0], (3, 3), (1, 1), (1, 1), 1.0, rng);
        let mut enc = Vec::new();
        for (i, s) in cfg.level_strides.iter().enumerate() {
            let res = ResBlock::new(&mut store, &format!("enc.l{i}.res"), lc[i], rng);
            let resample = if *s != [1, 1] {
                let (k, p) = down_kernel(*s);
                Some(Conv::new(&mut store, &format!("enc.l{i}.down"), lc[i], next(i), k, (s[0], s[1]), p, 1.0, rng))
            } else if next(i) != lc[i] {
                Some(Conv::new(&mut store, &format!("enc.l{i}.proj"), lc[i], next(i), (1, 1), (1, 1), (0, 0), 1.0, rng))
            } else {
                None
            };
            enc.push(Level { res, resample });
        }
        let top = *lc.last().expect("levels");
        let enc_out = Conv::new(&mut store, "enc.out", top, cfg.latent_dim, (1, 1), (1, 1), (0, 0), 0.5, rng);
        let codebook = store.add("codebook", Tensor::randn(&[cfg.codebook_size, cfg.latent_dim], 1.0, rng));
        let dec_in = Conv::new(&mut store, "dec.in", cfg.latent_dim, top, (3, 3), (1, 1), (1, 1), 1.0, rng);
        let mut dec = Vec::new();
        for (i, s) in cfg.level_strides.iter().enumerate().rev() {
            let resample = if *s != [1, 1] {
                let (k, p) = down_kernel(*s);
                Some(Conv::transposed(&mut store, &format!("dec.l{i}.up"), next(i), lc[i], k, (s[0], s[1]), p, rng))
            } else if next(i) != lc[i] {
                Some(Conv::new(&mut store, &format!("dec.l{i}.proj"), next(i), lc[i], (1, 1), (1, 1), (0, 0), 1.0, rng))
            } else {
                None
            };
            let res = ResBlock::new(&mut store, &format!("dec.l{i}.res"), lc[i], rng);
            dec.push(Level { res, resample });
        }
        let dec_out = Conv::new(&mut store, "dec.out", lc[0], c, (3, 3), (1, 1), (1, 1), 0.5, rng);
        let dec_bias = store.add("dec.freq_bias", Tensor::zeros(&[c, profile.dsp.bins(), 1]));
        Self {
            cfg,
            channels: c,
            bins: profile.dsp.bins(),
            store,
            stem,
            enc,
            enc_out,
            codebook,
            dec_in,
            dec,
            dec_out,
            dec_bias,
        }
    }

    pub fn downsample(&self) -> (usize, usize) {
        self.cfg.level_strides.iter().fold((1, 1), |(a, b), s| (a * s[0], b * s[1]))
    }

    /// `x[B, 2C, H, W]` -> latents `[B, d, H', W']`.
    pub fn encode(&self, g: &mut G, x: Var) -> Result<Var> {
        let mut h = self.stem.forward(g, &self.store, x)?;
        for l in &self.enc {
            h = l.res.forward(g, &self.store, h)?;
            if let Some(c) = &l.resample {
                h = g.leaky_relu(h, 0.2);
                h = c.forward(g, &self.store, h)?;
            }
        }
        let h = g.leaky_relu(h, 0.2);
        self.enc_out.forward(g, &self.store, h)
    }

    /// `z[B, d, H', W']` -> reconstruction `[B, C, H, W]`.
    pub fn decode(&self, g: &mut G, z: Var) -> Result<Var> {
        let mut h = self.dec_in.forward(g, &self.store, z)?;
        for l in &self.dec {
            if let Some(c) = &l.resample {
                h = g.leaky_relu(h, 0.2);
                h = c.forward(g, &self.store, h)?;
            }
            h = l.res.forward(g, &self.store, h)?;
        }
        let h = g.leaky_relu(h, 0.2);
        let out = self.dec_out.forward(g, &self.store, h)?;
        let bias = g.param(&self.store, self.dec_bias);
        Ok(g.add(out, bias)?)
    }

    /// Final decoder layer, the anchor of the adaptive adversarial weight.
    pub fn anchor_params(&self) -> Vec<ParamId> {
        vec![self.dec_out.w]
    }

    pub fn codebook_snapshot(&self) -> Codebook {
        let t = self.store.get(self.codebook);
        Codebook::new(self.cfg.codebook_size, self.cfg.latent_dim, t.data().to_vec()).expect("codebook shape")
    }

    /// Encodes, quantizes with the straight-through estimator and decodes.
    fn forward_st(&self, g: &mut G, x: Var) -> Result<StForward> {
        let e = self.encode(g, x)?;
        let s = g.shape(e).to_vec();
        let (b, d, h, w) = (s[0], s[1], s[2], s[3]);
        let e_perm = g.permute(e, &[0, 2, 3, 1])?;
        let rows = g.reshape(e_perm, &[b * h * w, d])?;
        let cb = self.codebook_snapshot();
        let idx = nearest_codes(g.value(rows).data(), &cb);
        let cbv = g.param(&self.store, self.codebook);
        let z = g.index_select(cbv, &idx)?;
        let delta = g.sub(z, rows)?;
        let delta = g.stop_gradient(delta);
        let zst = g.add(rows, delta)?;
        let zst = g.reshape(zst, &[b, h, w, d])?;
        let zst = g.permute(zst, &[0, 3, 1, 2])?;
        let recon = self.decode(g, zst)?;
        Ok(StForward { rows, z, idx, recon })
    }

    /// Reconstruction of a token grid `[h * w]`.
    pub fn detokenize(&self, indices: &[usize], h: usize, w: usize) -> Result<Vec<f32>> {
        let mut g = G::new();
        let cb = g.param_detached(&self.store, self.codebook);
        let z = g.embedding(cb, indices, &[1, h, w])?;
        let z = g.permute(z, &[0, 3, 1, 2])?;
        let out = self.decode(&mut g, z)?;
        Ok(g.value(out).data().to_vec())
    }

    /// Token indices for each `window_frames` block of a session, full
    /// montage, concatenated along time.
    pub fn tokenize(&self, spec: &Spectrogram) -> Result<TokenCache> {
        self.tokenize_with(spec, &vec![true; spec.channels])
    }

    /// Tokens with every channel outside `keep` presented as missing.
    pub fn tokenize_with(&self, spec: &Spectrogram, keep: &[bool]) -> Result<TokenCache> {
        if keep.len() != spec.channels {
            return data(format!("channel mask of {} for {} channels", keep.len(), spec.channels));
        }
        let keep: Vec<bool> = keep.iter().zip(&spec.channel_available).map(|(a, b)| *a && *b).collect();
        let wf = self.cfg.window_frames;
        let (fh, fw) = self.downsample();
        let n_win = spec.frames.div_ceil(wf).max(1);
        let (h, ww) = (spec.bins / fh, wf / fw);
        let mut cols = vec![0u16; h * ww * n_win];
        let cb = self.codebook_snapshot();
        const CHUNK: usize = 4;
        for start in (0..n_win).step_by(CHUNK) {
            let wins: Vec<usize> = (start..(start + CHUNK).min(n_win)).collect();
            let mut input = Vec::new();
            for &wi in &wins {
                let block = spec.window(wi * wf, wf);
                input.extend(encoder_input(&block, &keep, self.channels, spec.bins * wf));
            }
            let mut g = G::new();
            let x = g.constant(Tensor::new(&[wins.len(), 2 * self.channels, spec.bins, wf], input)?);
            let e = self.encode(&mut g, x)?;
            let e = g.permute(e, &[0, 2, 3, 1])?;
            let idx = nearest_codes(g.value(e).data(), &cb);
            for (bi, &wi) in wins.iter().enumerate() {
                for r in 0..h {
                    for c in 0..ww {
                        cols[r * ww * n_win + wi * ww + c] = idx[(bi * h + r) * ww + c] as u16;
                    }
                }
            }
        }
        Ok(TokenCache {
            session_id: spec.session_id,
            patient_id: spec.patient_id,
            k: self.cfg.codebook_size,
            h,
            w: ww * n_win,
            valid_w: spec.frames.div_ceil(fw),
            codebook_hash: cb.hash(),
            indices: cols,
        })
    }

    pub fn checkpoint(&self, disc: Option<&Discriminator>, profile_hash: &str, usage: &[u64]) -> Checkpoint {
        let cb = self.codebook_snapshot();
        let mut meta = CheckpointMeta {
            stage: "tokenizer".into(),
            profile_hash: profile_hash.into(),
            ..Default::default()
        };
        meta.notes.insert("codebook_hash".into(), cb.hash());
        meta.notes.insert("usage".into(), serde_json::to_string(usage).expect("usage serializes"));
        meta.discardable.push("disc.".into());
        let mut ck = Checkpoint::capture(&self.store, None, None, meta);
        if let Some(d) = disc {
            let entries = d.store.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect();
            ck.insert_table("disc", entries);
        }
        ck
    }

    pub fn from_checkpoint(profile: &Profile, ck: &Checkpoint) -> Result<Self> {
        if ck.meta.stage != "tokenizer" {
            return data(format!("expected a tokenizer checkpoint, found stage {:?}", ck.meta.stage));
        }
        let mut tok = Self::new(profile, &mut stage_rng(profile.seed, "tokenizer.init"));
        let loaded = ck.load_into(TABLE_PARAMS, &mut tok.store, false)?;
        if loaded.len() != tok.store.len() {
            return data(format!(
                "tokenizer checkpoint holds {} of {} parameters; profile architecture differs",
                loaded.len(),
                tok.store.len()
            ));
        }
        if let Some(h) = ck.meta.notes.get("codebook_hash") {
            if *h != tok.codebook_snapshot().hash() {
                return data("tokenizer checkpoint codebook hash does not match its weights");
            }
        }
        Ok(tok)
    }

    pub fn usage_from_checkpoint(ck: &Checkpoint) -> Vec<u64> {
        ck.meta
            .notes
            .get("usage")
            .and_then(|s| serde_json::from_str(s).ok())
            .unwrap_or_default()
    }
}

struct StForward {
    rows: Var,
    z: Var,
    idx: Vec<usize>,
    recon: Var,
}

/// Reconstruction target with never-recorded channels replaced by the
/// detached prediction, so they add nothing to the loss.
fn recorded_target(g: &mut G, real: Var, recon: Var, available: &[Vec<bool>]) -> Result<Var> {
    if available.iter().all(|a| a.iter().all(|&v| v)) {
        return Ok(real);
    }
    let (b, c) = (available.len(), available[0].len());
    let m: Vec<f32> = available.iter().flatten().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    let inv: Vec<f32> = m.iter().map(|v| 1.0 - v).collect();
    let m = g.constant(Tensor::new(&[b, c, 1, 1], m)?);
    let inv = g.constant(Tensor::new(&[b, c, 1, 1], inv)?);
    let kept = g.mul(real, m)?;
    let sg = g.stop_gradient(recon);
    let fill = g.mul(sg, inv)?;
    Ok(g.add(kept, fill)?)
}

/// Stacks `C` masked spectrogram planes and `C` indicator planes.
pub fn encoder_input(block: &[f32], keep: &[bool], channels: usize, plane: usize) -> Vec<f32> {
    let mut out = vec![0f32; 2 * channels * plane];
    for c in 0..channels {
        if keep[c] {
            out[c * plane..(c + 1) * plane].copy_from_slice(&block[c * plane..(c + 1) * plane]);
            out[(channels + c) * plane..(channels + c + 1) * plane].fill(1.0);
        }
    }
    out
}

/// PatchGAN critic: strided 4×4 convolutions ending in one logit per patch.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub store: Store,
    convs: Vec<Conv>,
}

impl Discriminator {
    pub fn new(cfg: &TokenizerConfig, channels: usize, rng: &mut StageRng) -> Self {
        let mut store = Store::new();
        let mut widths = vec![channels];
        widths.extend(&cfg.disc_channels);
        widths.push(1);
        let convs = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Conv::new(&mut store, &format!("disc.c{i}"), w[0], w[1], (4, 4), (2, 2), (1, 1), 1.0, rng))
            .collect();
        Self { store, convs }
    }

    /// Critic scores; `detached` enters the weights as constants.
    pub fn forward(&self, g: &mut G, x: Var, detached: bool) -> Result<Var> {
        let mut h = x;
        for (i, c) in self.convs.iter().enumerate() {
            let (w, b) = if detached {
                (g.param_detached(&self.store, c.w), g.param_detached(&self.store, c.b))
            } else {
                (g.param(&self.store, c.w), g.param(&self.store, c.b))
            };
            h = g.conv2d(h, w, Some(b), c.stride, c.pad)?;
            if i + 1 < self.convs.len() {
                h = g.leaky_relu(h, 0.2);
            }
        }
        Ok(h)
    }

    /// `(d_loss, g_adv)`; the critic sees the fake sample through a stop
    /// gradient in `d_loss` only.
    pub fn losses(&self, g: &mut G, real: Var, fake: Var) -> Result<(Var, Var)> {
        let fake_sg = g.stop_gradient(fake);
        let dr = self.forward(g, real, false)?;
        let df_sg = self.forward(g, fake_sg, false)?;
        let d_loss = hinge_d_loss(g, dr, df_sg)?;
        let df = self.forward(g, fake, false)?;
        Ok((d_loss, hinge_g_loss(g, df)))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TokLosses {
    pub step: u64,
    pub rec: f64,
    pub code: f64,
    pub commit: f64,
    pub adv: f64,
    pub lambda_adv: f64,
    pub d_loss: f64,
    pub total: f64,
}

impl TokLosses {
    pub const HEADER: &'static str = "step\trec\tcode\tcommit\tadv\tlambda_adv\td_loss\ttotal";

    pub fn row(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.4}\t{:.6}\t{:.6}",
            self.step, self.rec, self.code, self.commit, self.adv, self.lambda_adv, self.d_loss, self.total
        )
    }
}

/// One training batch: full spectrogram windows `[B, C, H, W]` and each
/// example's available channels.
pub struct TokBatch {
    pub real: Tensor<f32>,
    pub available: Vec<Vec<bool>>,
}

/// Random `window_frames` crops across sessions.
pub fn sample_batch(specs: &[Spectrogram], batch: usize, window: usize, rng: &mut StageRng) -> Result<TokBatch> {
    if specs.is_empty() {
        return data("no spectrograms to sample from");
    }
    let (c, h) = (specs[0].channels, specs[0].bins);
    let mut vals = Vec::with_capacity(batch * c * h * window);
    let mut available = Vec::with_capacity(batch);
    for _ in 0..batch {
        let s = &specs[rng.random_range(0..specs.len())];
        let start = if s.frames > window { rng.random_range(0..=s.frames - window) } else { 0 };
        vals.extend(s.window(start, window));
        available.push(s.channel_available.clone());
    }
    Ok(TokBatch {
        real: Tensor::new(&[batch, c, h, window], vals)?,
        available,
    })
}

pub struct TokenizerTrainer {
    pub tok: Tokenizer,
    pub disc: Discriminator,
    pub schedule: MaskSchedule,
    gen_opt: Adam<f32>,
    disc_opt: Adam<f32>,
    last_used: Vec<u64>,
    pub usage: Vec<u64>,
    pub step: u64,
    initialized: bool,
    rng: StageRng,
}

impl TokenizerTrainer {
    pub fn new(profile: &Profile) -> Result<Self> {
        let cfg = &profile.tokenizer;
        let mut init = stage_rng(profile.seed, "tokenizer.init");
        let tok = Tokenizer::new(profile, &mut init);
        let disc = Discriminator::new(cfg, tok.channels, &mut init);
        let opt = AdamConfig::adamw(cfg.lr, cfg.beta1, cfg.beta2, 0.0);
        Ok(Self {
            gen_opt: Adam::new(&tok.store, opt),
            disc_opt: Adam::new(&disc.store, opt),
            schedule: MaskSchedule::from_profile(profile)?,
            last_used: vec![0; cfg.codebook_size],
            usage: vec![0; cfg.codebook_size],
            tok,
            disc,
            step: 0,
            initialized: false,
            rng: stage_rng(profile.seed, "tokenizer.train"),
        })
    }

    /// Seeds every codebook row from distinct encoder outputs.
    fn init_codebook(&mut self, rows: &[f32]) {
        let d = self.tok.cfg.latent_dim;
        let n = rows.len() / d;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        let k = self.tok.cfg.codebook_size;
        let cb = self.tok.store.get_mut(self.tok.codebook);
        for r in 0..k {
            let src = order[r % n];
            for j in 0..d {
                let jitter = if r >= n { 0.01 * (self.rng.random::<f32>() - 0.5) } else { 0.0 };
                cb.data_mut()[r * d + j] = rows[src * d + j] + jitter;
            }
        }
        self.initialized = true;
    }

    fn revive_dead_codes(&mut self, rows: &[f32]) {
        let d = self.tok.cfg.latent_dim;
        let n = rows.len() / d;
        let horizon = self.tok.cfg.dead_code_steps;
        for k in 0..self.last_used.len() {
            if self.step >= self.last_used[k] + horizon {
                let src = self.rng.random_range(0..n);
                let cb = self.tok.store.get_mut(self.tok.codebook);
                cb.data_mut()[k * d..(k + 1) * d].copy_from_slice(&rows[src * d..(src + 1) * d]);
                self.last_used[k] = self.step;
            }
        }
    }

    pub fn train_step(&mut self, batch: &TokBatch) -> Result<TokLosses> {
        let cfg = self.tok.cfg.clone();
        let shape = batch.real.shape().to_vec();
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let plane = h * w;
        let mut input = Vec::with_capacity(b * 2 * c * plane);
        for i in 0..b {
            let draw = self.schedule.sample(self.step, &batch.available[i], &mut self.rng);
            input.extend(encoder_input(
                &batch.real.data()[i * c * plane..(i + 1) * c * plane],
                &draw.keep,
                c,
                plane,
            ));
        }
        if !self.initialized {
            let mut g = G::new();
            let x = g.constant(Tensor::new(&[b, 2 * c, h, w], input.clone())?);
            let e = self.tok.encode(&mut g, x)?;
            let e = g.permute(e, &[0, 2, 3, 1])?;
            let rows = g.value(e).data().to_vec();
            self.init_codebook(&rows);
        }

        let mut g = G::new();
        let x = g.constant(Tensor::new(&[b, 2 * c, h, w], input)?);
        let real = g.constant(batch.real.clone());
        let fwd = self.tok.forward_st(&mut g, x)?;
        let target = recorded_target(&mut g, real, fwd.recon, &batch.available)?;
        let rec = recon_loss(&mut g, target, fwd.recon, cfg.gamma_diff)?;
        let rows_sg = g.stop_gradient(fwd.rows);
        let z_sg = g.stop_gradient(fwd.z);
        let code = g.l2_loss(rows_sg, fwd.z)?;
        let commit = g.l2_loss(fwd.rows, z_sg)?;
        let code_w = g.scale(code, cfg.lambda_code);
        let commit_w = g.scale(commit, cfg.lambda_commit);
        let mut total = g.add(rec, code_w)?;
        total = g.add(total, commit_w)?;
        let adversarial = self.step >= cfg.disc_start;
        let (mut adv_v, mut lambda) = (0.0, 0.0);
        if adversarial {
            let d_fake = self.disc.forward(&mut g, fwd.recon, true)?;
            let adv = hinge_g_loss(&mut g, d_fake);
            let anchors: Vec<Var> = self.tok.anchor_params().iter().map(|&p| g.param(&self.tok.store, p)).collect();
            lambda = adaptive_adv_weight(&g, rec, adv, &anchors, cfg.adv_eps, cfg.adv_weight_max)?;
            adv_v = g.scalar(adv);
            let adv_w = g.scale(adv, lambda * cfg.adv_factor);
            total = g.add(total, adv_w)?;
        }
        let total_v = g.scalar(total);
        if !total_v.is_finite() {
            return Err(CoreError::Numeric(format!("tokenizer loss at step {}", self.step)));
        }
        let grads = g.backward(total)?.param_grads(&self.tok.store);
        self.gen_opt.step(&mut self.tok.store, &grads)?;

        let mut d_loss_v = 0.0;
        if adversarial {
            let mut dg = G::new();
            let real = dg.constant(batch.real.clone());
            let fake = dg.constant(g.value(fwd.recon).clone());
            let dr = self.disc.forward(&mut dg, real, false)?;
            let df = self.disc.forward(&mut dg, fake, false)?;
            let d_loss = hinge_d_loss(&mut dg, dr, df)?;
            d_loss_v = dg.scalar(d_loss);
            let grads = dg.backward(d_loss)?.param_grads(&self.disc.store);
            self.disc_opt.step(&mut self.disc.store, &grads)?;
        }

        for &k in &fwd.idx {
            self.last_used[k] = self.step;
            self.usage[k] += 1;
        }
        let rows_v = g.value(fwd.rows).data().to_vec();
        self.step += 1;
        if cfg.dead_code_steps > 0 {
            self.revive_dead_codes(&rows_v);
        }
        Ok(TokLosses {
            step: self.step - 1,
            rec: g.scalar(rec),
            code: g.scalar(code),
            commit: g.scalar(commit),
            adv: adv_v,
            lambda_adv: lambda,
            d_loss: d_loss_v,
            total: total_v,
        })
    }
}

/// Trains for `cfg.steps` steps on random crops of `specs`.
pub fn train_tokenizer(
    profile: &Profile,
    specs: &[Spectrogram],
    mut progress: impl FnMut(&TokLosses),
) -> Result<(TokenizerTrainer, Vec<TokLosses>)> {
    let mut tr = TokenizerTrainer::new(profile)?;
    let mut rng = stage_rng(profile.seed, "tokenizer.batches");
    let mut log = Vec::new();
    for _ in 0..profile.tokenizer.steps {
        let batch = sample_batch(specs, profile.tokenizer.batch, profile.tokenizer.window_frames, &mut rng)?;
        let l = tr.train_step(&batch)?;
        progress(&l);
        log.push(l);
    }
    Ok((tr, log))
}

pub const TOKEN_MAGIC: &[u8; 8] = b"CLEFTOK1";

/// Token indices of one session, row-major `[h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenCache {
    pub session_id: u32,
    pub patient_id: u32,
    pub k: usize,
    pub h: usize,
    pub w: usize,
    /// Columns backed by recorded frames; the rest cover padding.
    pub valid_w: usize,
    pub codebook_hash: String,
    pub indices: Vec<u16>,
}

impl TokenCache {
    pub fn at(&self, r: usize, c: usize) -> usize {
        self.indices[r * self.w + c] as usize
    }
}

/// Header: magic, then `u32` K, H', W', session, patient, valid W', then
/// the 32-byte codebook digest; body: `u16` indices.
pub fn write_tokens<W: Write>(mut w: W, t: &TokenCache) -> std::io::Result<()> {
    w.write_all(TOKEN_MAGIC)?;
    for v in [t.k, t.h, t.w, t.session_id as usize, t.patient_id as usize, t.valid_w] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    let digest: Vec<u8> = (0..32)
        .map(|i| u8::from_str_radix(t.codebook_hash.get(2 * i..2 * i + 2).unwrap_or("00"), 16).unwrap_or(0))
        .collect();
    w.write_all(&digest)?;
    for &i in &t.indices {
        w.write_all(&i.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tokens<R: Read>(mut r: R) -> Result<TokenCache> {
    let bad = |e: std::io::Error| CoreError::Data(format!("token cache: {e}"));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(bad)?;
    if &magic != TOKEN_MAGIC {
        return data("not a token cache file");
    }
    let mut u = [0u32; 6];
    for v in &mut u {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(bad)?;
        *v = u32::from_le_bytes(b);
    }
    let [k, h, w, session_id, patient_id, valid_w] = u;
    let mut digest = [0u8; 32];
    r.read_exact(&mut digest).map_err(bad)?;
    let n = h as usize * w as usize;
    let mut raw = vec![0u8; n * 2];
    r.read_exact(&mut raw).map_err(bad)?;
    let indices: Vec<u16> = raw.chunks(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect();
    if let Some(&bad_idx) = indices.iter().find(|&&i| i as u32 >= k) {
        return data(format!("token index {bad_idx} outside codebook of {k}"));
    }
    Ok(TokenCache {
        session_id,
        patient_id,
        k: k as usize,
        h: h as usize,
        w: w as usize,
        valid_w: valid_w as usize,
        codebook_hash: hex(&digest),
        indices,
    })
}

pub fn token_path(dir: &Path, session_id: u32) -> PathBuf {
    dir.join(format!("session_{session_id:06}.tok"))
}

pub fn save_tokens(dir: &Path, t: &TokenCache) -> Result<PathBuf> {
    let path = token_path(dir, t.session_id);
    let f = File::create(&path).map_err(io_err(&path))?;
    let mut w = BufWriter::new(f);
    write_tokens(&mut w, t).map_err(io_err(&path))?;
    w.flush().map_err(io_err(&path))?;
    Ok(path)
}

pub fn load_tokens(path: &Path) -> Result<TokenCache> {
    let f = File::open(path).map_err(io_err(path))?;
    read_tokens(BufReader::new(f))
}

/// Every cache file in `dir`, ordered by session id.
pub fn load_token_dir(dir: &Path) -> Result<Vec<TokenCache>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "tok"))
        .collect();
    paths.sort();
    paths.iter().map(|p| load_tokens(p)).collect()
}

/// Refuses caches built with a different codebook.
pub fn check_cache_hash(caches: &[TokenCache], expected: &str) -> Result<()> {
    for t in caches {
        if t.codebook_hash != expected {
            return data(format!(
                "token cache for session {} was built with codebook {}, expected {}",
                t.session_id,
                &t.codebook_hash[..12.min(t.codebook_hash.len())],
                &expected[..12.min(expected.len())]
            ));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    fn random_codebook(k: usize, d: usize, rng: &mut StageRng) -> Codebook {
        Codebook::new(k, d, (0..k * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn exact_entry_maps_to_itself() {
        let mut rng = rng_from(3);
        let cb = random_codebook(32, 4, &mut rng);
        let lat = cb.entry(17).to_vec();
        let grid = quantize(&lat, 1, 1, &cb).unwrap();
        assert_eq!(grid.indices, vec![17]);
        assert_eq!(grid.quantized, lat);
    }

    #[test]
    fn equidistant_entries_pick_lower_index() {
        let cb = Codebook::new(3, 2, vec![5.0, 5.0, 1.0, 0.0, -1.0, 0.0]).unwrap();
        assert_eq!(nearest_codes(&[0.0, 0.0], &cb), vec![1]);
        let cb = Codebook::new(2, 1, vec![0.5, 0.5]).unwrap();
        assert_eq!(nearest_codes(&[0.2], &cb), vec![0]);
    }

    #[test]
    fn quantize_layout_is_channel_major() {
        let cb = Codebook::new(2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        // d=2, h=1, w=2: position 0 = (0.9, 0.8), position 1 = (0.1, 0.0)
        let grid = quantize(&[0.9, 0.1, 0.8, 0.0], 1, 2, &cb).unwrap();
        assert_eq!(grid.indices, vec![1, 0]);
        assert_eq!(grid.quantized, vec![1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn codebook_rejects_nan_and_tiny() {
        assert!(Codebook::new(1, 2, vec![0.0, 0.0]).is_err());
        assert!(Codebook::new(2, 1, vec![0.0, f32::NAN]).is_err());
    }

    #[test]
    fn mask_ramp_starts_at_full_montage() {
        let p = Profile::desk();
        let s = MaskSchedule::from_profile(&p).unwrap();
        let mut rng = rng_from(5);
        let avail = vec![true; 8];
        for _ in 0..200 {
            assert_eq!(s.sample(0, &avail, &mut rng).keep, avail);
        }
        let mut prev = (0.0, 0.0);
        for step in 0..300 {
            let e = s.effective(step);
            assert!(e.0 >= prev.0 && e.1 >= prev.1);
            prev = e;
        }
    }

    #[test]
    fn mask_never_keeps_unavailable_channels() {
        let s = MaskSchedule {
            p_psg: 0.5,
            p_drop: 0.5,
            ramp_steps: 1,
            psg_subset: vec![1, 2],
        };
        let mut rng = rng_from(6);
        let avail = vec![true, false, true, true];
        for _ in 0..500 {
            let d = s.sample(10, &avail, &mut rng);
            assert!(d.keep.iter().any(|&k| k));
            assert!(!d.keep[1]);
        }
    }

    #[test]
    fn resample_guard_keeps_single_channel() {
        let s = MaskSchedule {
            p_psg: 0.0,
            p_drop: 1.0,
            ramp_steps: 1,
            psg_subset: vec![],
        };
        let mut rng = rng_from(7);
        assert_eq!(s.sample(5, &[true], &mut rng).keep, vec![true]);
    }

    #[test]
    fn token_cache_round_trip() {
        let t = TokenCache {
            session_id: 12,
            patient_id: 4,
            k: 64,
            h: 2,
            w: 3,
            valid_w: 2,
            codebook_hash: "ab".repeat(32),
            indices: vec![0, 63, 5, 7, 1, 2],
        };
        let mut buf = Vec::new();
        write_tokens(&mut buf, &t).unwrap();
        assert_eq!(read_tokens(&buf[..]).unwrap(), t);
        assert!(check_cache_hash(&[t.clone()], &"ab".repeat(32)).is_ok());
        assert!(check_cache_hash(&[t], &"cd".repeat(32)).is_err());
    }

    #[test]
    fn tokenizer_shapes_round_trip() {
        let p = Profile::desk();
        let mut rng = rng_from(8);
        let tok = Tokenizer::new(&p, &mut rng);
        let (c, h, w) = (8, 64, 64);
        let mut g = G::new();
        let x = g.constant(Tensor::zeros(&[2, 2 * c, h, w]));
        let e = tok.encode(&mut g, x).unwrap();
        assert_eq!(g.shape(e), &[2, 32, 4, 8]);
        let out = tok.decode(&mut g, e).unwrap();
        assert_eq!(g.shape(out), &[2, c, h, w]);
        let rec = tok.detokenize(&[3; 32], 4, 8).unwrap();
        assert_eq!(rec.len(), c * h * w);
    }
}
