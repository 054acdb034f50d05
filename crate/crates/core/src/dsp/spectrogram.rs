use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::{compute_dpss, FilterSpec, TaperSet};
use crate::cohortgen::RawSession;
use crate::error::{data, io_err, CoreError, Result};
use crate::profile::DspConfig;

/// Normalized log-power grid, `values[(c * bins + h) * frames + w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub session_id: u32,
    pub patient_id: u32,
    pub channels: usize,
    pub bins: usize,
    pub frames: usize,
    pub freq_res: f32,
    pub frame_stride_s: f32,
    pub clamp: [f32; 2],
    pub channel_available: Vec<bool>,
    pub values: Vec<f32>,
}

impl Spectrogram {
    pub fn at(&self, c: usize, h: usize, w: usize) -> f32 {
        self.values[(c * self.bins + h) * self.frames + w]
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.bins * self.frames;
        &self.values[c * n..(c + 1) * n]
    }

    /// Frames `[start, start + len)` of every channel, zero-extended past the
    /// end, as a C×H×len block.
    pub fn window(&self, start: usize, len: usize) -> Vec<f32> {
        let mut out = vec![-1.0; self.channels * self.bins * len];
        let take = self.frames.saturating_sub(start).min(len);
        for c in 0..self.channels {
            for h in 0..self.bins {
                let src = (c * self.bins + h) * self.frames + start;
                let dst = (c * self.bins + h) * len;
                out[dst..dst + take].copy_from_slice(&self.values[src..src + take]);
            }
        }
        out
    }

    /// Mean normalized value over a frequency range on the given channels.
    pub fn band_mean(&self, lo_hz: f64, hi_hz: f64, channels: &[usize]) -> f64 {
        let res = self.freq_res as f64;
        let h0 = (lo_hz / res).ceil() as usize;
        let h1 = ((hi_hz / res).ceil() as usize).min(self.bins);
        let mut sum = 0.0;
        let mut n = 0usize;
        for &c in channels {
            for h in h0..h1 {
                let row = &self.channel(c)[h * self.frames..(h + 1) * self.frames];
                sum += row.iter().map(|&v| v as f64).sum::<f64>();
                n += row.len();
            }
        }
        sum / n.max(1) as f64
    }
}

/// Taper set, FFT plan and filter cascade built once and reused per session.
pub struct SpectrogramEngine {
    pub cfg: DspConfig,
    pub tapers: TaperSet,
    pub filter: FilterSpec,
    fft: Arc<dyn Fft<f64>>,
}

impl SpectrogramEngine {
    pub fn new(cfg: &DspConfig) -> Result<Self> {
        let tapers = compute_dpss(cfg.window, cfg.nw, cfg.k_max, cfg.retain_threshold)?;
        if tapers.is_empty() {
            return crate::error::config("no taper passes the concentration threshold");
        }
        let filter = FilterSpec::from_config(cfg)?;
        let fft = FftPlanner::new().plan_fft_forward(cfg.window);
        Ok(Self {
            cfg: cfg.clone(),
            tapers,
            filter,
            fft,
        })
    }

    /// Filters then transforms a raw session.
    pub fn process(&self, session: &RawSession) -> Result<Spectrogram> {
        let clean = super::preprocess(session, &self.filter)?;
        self.transform(&clean)
    }

    /// Spectrogram of an already filtered session.
    pub fn transform(&self, session: &RawSession) -> Result<Spectrogram> {
        let cfg = &self.cfg;
        let t = session.len();
        if t < cfg.window {
            return data(format!(
                "session {} has {t} samples, shorter than one {}-sample window",
                session.session_id, cfg.window
            ));
        }
        if t <= cfg.pad_left.max(cfg.pad_right) {
            return data(format!("session {} too short to reflect-pad", session.session_id));
        }
        let bins = cfg.bins();
        if bins > cfg.window / 2 {
            return crate::error::config("band top exceeds Nyquist of the window");
        }
        let frames = cfg.frames(t);
        let c = session.channels();
        let mut values = vec![-1.0f32; c * bins * frames];
        for (ci, ch) in session.samples.iter().enumerate() {
            if !session.channel_available[ci] {
                continue;
            }
            let out = &mut values[ci * bins * frames..(ci + 1) * bins * frames];
            self.channel_into(ch, bins, frames, out);
        }
        Ok(Spectrogram {
            session_id: session.session_id,
            patient_id: session.patient_id,
            channels: c,
            bins,
            frames,
            freq_res: cfg.freq_res_hz as f32,
            frame_stride_s: (cfg.stride as f64 / cfg.sample_rate) as f32,
            clamp: [cfg.db_floor as f32, cfg.db_ceil as f32],
            channel_available: session.channel_available.clone(),
            values,
        })
    }

    fn channel_into(&self, x: &[f32], bins: usize, frames: usize, out: &mut [f32]) {
        let cfg = &self.cfg;
        let l = cfg.window;
        let n = x.len();
        let mut padded = Vec::with_capacity(n + cfg.pad_left + cfg.pad_right);
        padded.extend((1..=cfg.pad_left).rev().map(|i| x[i] as f64));
        padded.extend(x.iter().map(|&v| v as f64));
        padded.extend((0..cfg.pad_right).map(|i| x[n - 2 - i] as f64));
        let lam = &self.tapers.concentrations;
        let norm = 1.0 / (lam.iter().sum::<f64>() * cfg.sample_rate);
        let span = cfg.db_ceil - cfg.db_floor;
        let mut buf = vec![Complex64::new(0.0, 0.0); l];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0f64; 2 * bins];
        // Two real frames share one complex transform per taper.
        let mut f = 0;
        while f < frames {
            let pair = f + 1 < frames;
            power.iter_mut().for_each(|p| *p = 0.0);
            for (v, &lk) in self.tapers.tapers.iter().zip(lam) {
                let a = &padded[f * cfg.stride..f * cfg.stride + l];
                for i in 0..l {
                    let im = if pair { padded[(f + 1) * cfg.stride + i] * v[i] } else { 0.0 };
                    buf[i] = Complex64::new(a[i] * v[i], im);
                }
                self.fft.process_with_scratch(&mut buf, &mut scratch);
                for j in 0..bins {
                    let z = buf[j];
                    let zc = buf[(l - j) % l].conj();
                    let xa = (z + zc) * 0.5;
                    let xb = (z - zc) * Complex64::new(0.0, -0.5);
                    power[j] += lk * xa.norm_sqr();
                    power[bins + j] += lk * xb.norm_sqr();
                }
            }
            for (k, frame) in [f, f + 1].into_iter().enumerate() {
                if k == 1 && !pair {
                    break;
                }
                for j in 0..bins {
                    let p = power[k * bins + j] * norm;
                    let db = 10.0 * (p + cfg.log_eps).log10();
                    let v = (2.0 * (db - cfg.db_floor) / span - 1.0).clamp(-1.0, 1.0);
                    out[j * frames + frame] = v as f32;
                }
            }
            f += 2;
        }
    }
}

/// One-shot spectrogram with an explicit taper set.
pub fn multitaper_spectrogram(session: &RawSession, tapers: &TaperSet, cfg: &DspConfig) -> Result<Spectrogram> {
    let engine = SpectrogramEngine {
        cfg: cfg.clone(),
        tapers: tapers.clone(),
        filter: FilterSpec::from_config(cfg)?,
        fft: FftPlanner::new().plan_fft_forward(cfg.window),
    };
    engine.transform(session)
}

pub const SPEC_MAGIC: &[u8; 8] = b"CLEFSPG1";

pub fn write_spectrogram<W: Write>(mut w: W, s: &Spectrogram) -> std::io::Result<()> {
    let mut h = [0u8; 64];
    h[..8].copy_from_slice(SPEC_MAGIC);
    h[8..12].copy_from_slice(&(s.channels as u32).to_le_bytes());
    h[12..16].copy_from_slice(&(s.bins as u32).to_le_bytes());
    h[16..20].copy_from_slice(&(s.frames as u32).to_le_bytes());
    h[20..24].copy_from_slice(&s.freq_res.to_le_bytes());
    h[24..28].copy_from_slice(&s.frame_stride_s.to_le_bytes());
    h[28..32].copy_from_slice(&s.clamp[0].to_le_bytes());
    h[32..36].copy_from_slice(&s.clamp[1].to_le_bytes());
    let mask = s
        .channel_available
        .iter()
        .enumerate()
        .fold(0u64, |m, (i, &a)| if a { m | (1 << i) } else { m });
    h[36..44].copy_from_slice(&mask.to_le_bytes());
    h[44..48].copy_from_slice(&s.session_id.to_le_bytes());
    h[48..52].copy_from_slice(&s.patient_id.to_le_bytes());
    w.write_all(&h)?;
    let mut buf = Vec::with_capacity(s.values.len() * 4);
    for v in &s.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn read_spectrogram<R: Read>(mut r: R) -> Result<Spectrogram> {
    let mut h = [0u8; 64];
    r.read_exact(&mut h)
        .map_err(|e| CoreError::Data(format!("spectrogram header: {e}")))?;
    if &h[..8] != SPEC_MAGIC {
        return data("not a spectrogram cache (bad magic)");
    }
    let u32_at = |i: usize| u32::from_le_bytes(h[i..i + 4].try_into().unwrap());
    let f32_at = |i: usize| f32::from_le_bytes(h[i..i + 4].try_into().unwrap());
    let (channels, bins, frames) = (u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize);
    if channels == 0 || channels > 64 {
        return data(format!("spectrogram channel count {channels} out of range"));
    }
    let mask = u64::from_le_bytes(h[36..44].try_into().unwrap());
    let n = channels * bins * frames;
    let mut raw = vec![0u8; n * 4];
    r.read_exact(&mut raw)
        .map_err(|e| CoreError::Data(format!("spectrogram payload: {e}")))?;
    Ok(Spectrogram {
        session_id: u32_at(44),
        patient_id: u32_at(48),
        channels,
        bins,
        frames,
        freq_res: f32_at(20),
        frame_stride_s: f32_at(24),
        clamp: [f32_at(28), f32_at(32)],
        channel_available: (0..channels).map(|i| mask >> i & 1 == 1).collect(),
        values: raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect(),
    })
}

pub fn save_spectrogram(path: &Path, s: &Spectrogram) -> Result<()> {
    let f = std::fs::File::create(path).map_err(io_err(path))?;
    write_spectrogram(std::io::BufWriter::new(f), s).map_err(io_err(path))
}

pub fn load_spectrogram(path: &Path) -> Result<Spectrogram> {
    let f = std::fs::File::open(path).map_err(io_err(path))?;
    read_spectrogram(std::io::BufReader::new(f)).map_err(|e| match e {
        CoreError::Data(m) => CoreError::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}
