//! Filtering and multitaper spectrograms.

pub mod dpss;
pub mod filter;
mod spectrogram;

pub use dpss::{compute_dpss, TaperSet};
pub use spectrogram::{load_spectrogram, multitaper_spectrogram, read_spectrogram, save_spectrogram, write_spectrogram, Spectrogram, SpectrogramEngine};

use crate::cohortgen::RawSession;
use crate::error::{config, data, Result};
use crate::profile::DspConfig;
use filter::{butterworth, filtfilt, notch, Pass, Sos};

/// Band-pass plus mains notch cascade.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterSpec {
    pub band: [f64; 2],
    pub notches: Vec<f64>,
    pub sections: Vec<Sos>,
    pub sample_rate: f64,
    pub padlen: usize,
}

impl FilterSpec {
    pub fn from_config(cfg: &DspConfig) -> Result<Self> {
        let fs = cfg.sample_rate;
        let nyq = fs / 2.0;
        let [lo, hi] = [cfg.band_lo_hz, cfg.band_hi_hz];
        if !(0.0 < lo && lo < hi && hi < nyq) {
            return config(format!("band [{lo}, {hi}] must lie inside (0, {nyq})"));
        }
        let mut sections = butterworth(cfg.filter_order, lo, fs, Pass::High);
        sections.extend(butterworth(cfg.filter_order, hi, fs, Pass::Low));
        let mut notches = Vec::new();
        let mut f = cfg.notch_base_hz;
        while f > 0.0 && f < nyq - cfg.notch_nyquist_guard_hz {
            sections.push(notch(f, cfg.notch_q, fs));
            notches.push(f);
            f += cfg.notch_base_hz;
        }
        // Settling length of the slowest section: a few time constants of the
        // high-pass edge.
        let padlen = (3.0 * fs / (2.0 * std::f64::consts::PI * lo) * cfg.filter_order as f64 / 2.0).ceil() as usize;
        Ok(Self {
            band: [lo, hi],
            notches,
            sections,
            sample_rate: fs,
            padlen: padlen.min(6000),
        })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        filtfilt(&self.sections, x, self.padlen)
    }
}

/// Zero-phase band-pass and notch on every available channel.
pub fn preprocess(session: &RawSession, spec: &FilterSpec) -> Result<RawSession> {
    if (session.sample_rate - spec.sample_rate).abs() > 1e-9 {
        return data(format!(
            "session {} sampled at {} Hz, filter designed for {} Hz",
            session.session_id, session.sample_rate, spec.sample_rate
        ));
    }
    session.validate()?;
    let samples = session
        .samples
        .iter()
        .zip(&session.channel_available)
        .map(|(ch, &avail)| {
            if !avail {
                return ch.clone();
            }
            let x: Vec<f64> = ch.iter().map(|&v| v as f64).collect();
            spec.apply(&x).into_iter().map(|v| v as f32).collect()
        })
        .collect();
    Ok(RawSession {
        samples,
        ..session.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profile::Profile;
    use std::f64::consts::PI;

    fn spec() -> FilterSpec {
        FilterSpec::from_config(&Profile::desk().dsp).unwrap()
    }

    #[test]
    fn nyquist_notch_excluded() {
        let s = spec();
        assert_eq!(s.notches, vec![60.0]);
        let mut cfg = Profile::desk().dsp;
        cfg.notch_base_hz = 49.0;
        assert_eq!(FilterSpec::from_config(&cfg).unwrap().notches, vec![49.0]);
        cfg.notch_base_hz = 33.0;
        assert_eq!(FilterSpec::from_config(&cfg).unwrap().notches, vec![33.0, 66.0]);
    }

    #[test]
    fn dc_removed() {
        let y = spec().apply(&vec![5.0; 20_000]);
        let trim = &y[2000..18_000];
        assert!(trim.iter().all(|v| v.abs() < 1e-3), "{}", trim.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    }

    fn project(y: &[f64], f: f64, fs: f64) -> (f64, f64) {
        let (mut s, mut c) = (0.0, 0.0);
        for (n, v) in y.iter().enumerate() {
            let t = 2.0 * PI * f * n as f64 / fs;
            s += v * t.sin();
            c += v * t.cos();
        }
        let k = 2.0 / y.len() as f64;
        ((s * k).hypot(c * k), (c * k).atan2(s * k))
    }

    #[test]
    fn ten_hz_passes_without_phase_shift() {
        let fs = 200.0;
        let x: Vec<f64> = (0..20_000).map(|n| (2.0 * PI * 10.0 * n as f64 / fs).sin()).collect();
        let y = spec().apply(&x);
        // Whole cycles away from the edges.
        let (amp, phase) = project(&y[2000..18_000], 10.0, fs);
        let (amp0, phase0) = project(&x[2000..18_000], 10.0, fs);
        assert!((amp / amp0 - 1.0).abs() < 0.05, "{amp}");
        assert!((phase - phase0).abs() < 1e-6, "{}", phase - phase0);
    }

    #[test]
    fn sixty_hz_attenuated() {
        let fs = 200.0;
        let x: Vec<f64> = (0..20_000).map(|n| (2.0 * PI * 60.0 * n as f64 / fs).sin()).collect();
        let y = spec().apply(&x);
        let (amp, _) = project(&y[2000..18_000], 60.0, fs);
        assert!(20.0 * amp.log10() <= -20.0, "{amp}");
    }

    #[test]
    fn unavailable_channels_untouched() {
        let s = RawSession {
            session_id: 0,
            patient_id: 0,
            sample_rate: 200.0,
            channel_available: vec![true, false],
            samples: vec![vec![1.0; 400], vec![3.0; 400]],
        };
        let out = preprocess(&s, &spec()).unwrap();
        assert_eq!(out.samples[1], s.samples[1]);
        let mut bad = s.clone();
        bad.samples[0][3] = f32::NAN;
        assert!(preprocess(&bad, &spec()).is_err());
    }
}
