//! Second-order-section IIR design and zero-phase application.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;

/// One biquad, `a0` normalized to 1: `[b0, b1, b2, a1, a2]`.
pub type Sos = [f64; 5];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pass {
    Low,
    High,
}

/// Butterworth sections of even `order` with cutoff `fc` Hz, via the
/// prewarped bilinear transform.
pub fn butterworth(order: usize, fc: f64, fs: f64, pass: Pass) -> Vec<Sos> {
    assert!(order >= 2 && order % 2 == 0, "even order required");
    assert!(fc > 0.0 && fc < fs / 2.0, "cutoff must lie in (0, Nyquist)");
    let k = 2.0 * fs;
    let wc = k * (PI * fc / fs).tan();
    let mut out = Vec::with_capacity(order / 2);
    for i in 0..order / 2 {
        let theta = PI * (2 * i + order + 1) as f64 / (2 * order) as f64;
        let proto = Complex64::from_polar(1.0, theta);
        let s = match pass {
            Pass::Low => proto * wc,
            Pass::High => wc / proto,
        };
        let z = (k + s) / (k - s);
        let (a1, a2) = (-2.0 * z.re, z.norm_sqr());
        let (b1, at) = match pass {
            Pass::Low => (2.0, 1.0),
            Pass::High => (-2.0, -1.0),
        };
        // Unity gain at DC (low-pass) or Nyquist (high-pass).
        let num = 1.0 + b1 * at + at * at;
        let den = 1.0 + a1 * at + a2 * at * at;
        let g = den / num;
        out.push([g, g * b1, g, a1, a2]);
    }
    out
}

/// Second-order notch at `f0` with quality factor `q`.
pub fn notch(f0: f64, q: f64, fs: f64) -> Sos {
    let w0 = 2.0 * PI * f0 / fs;
    let alpha = w0.sin() / (2.0 * q);
    let a0 = 1.0 + alpha;
    let c = -2.0 * w0.cos();
    [1.0 / a0, c / a0, 1.0 / a0, c / a0, (1.0 - alpha) / a0]
}

/// Complex frequency response of a cascade at `f` Hz.
pub fn response(sos: &[Sos], f: f64, fs: f64) -> Complex64 {
    let z1 = Complex64::from_polar(1.0, -2.0 * PI * f / fs);
    let z2 = z1 * z1;
    sos.iter().fold(Complex64::new(1.0, 0.0), |h, s| {
        h * (s[0] + z1 * s[1] + z2 * s[2]) / (1.0 + z1 * s[3] + z2 * s[4])
    })
}

/// Steady-state transposed direct-form II states for a unit step.
fn step_zi(sos: &[Sos]) -> Vec<[f64; 2]> {
    let mut gain = 1.0;
    sos.iter()
        .map(|s| {
            let [b0, b1, b2, a1, a2] = *s;
            let h = (b0 + b1 + b2) / (1.0 + a1 + a2);
            let x = gain;
            let y = h * x;
            gain = y;
            let z2 = b2 * x - a2 * y;
            let z1 = y - b0 * x;
            [z1, z2]
        })
        .collect()
}

fn sosfilt(sos: &[Sos], x: &mut [f64], zi: &[[f64; 2]], scale: f64) {
    for (s, z0) in sos.iter().zip(zi) {
        let [b0, b1, b2, a1, a2] = *s;
        let (mut z1, mut z2) = (z0[0] * scale, z0[1] * scale);
        for v in x.iter_mut() {
            let xin = *v;
            let y = b0 * xin + z1;
            z1 = b1 * xin - a1 * y + z2;
            z2 = b2 * xin - a2 * y;
            *v = y;
        }
    }
}

/// Forward-backward filtering with odd reflection of `padlen` samples at
/// both ends and step-response initial conditions.
pub fn filtfilt(sos: &[Sos], x: &[f64], padlen: usize) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let pad = padlen.min(n - 1);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    for i in (1..=pad).rev() {
        ext.push(2.0 * x[0] - x[i]);
    }
    ext.extend_from_slice(x);
    for i in 1..=pad {
        ext.push(2.0 * x[n - 1] - x[n - 1 - i]);
    }
    let zi = step_zi(sos);
    let x0 = ext[0];
    sosfilt(sos, &mut ext, &zi, x0);
    ext.reverse();
    let y0 = ext[0];
    sosfilt(sos, &mut ext, &zi, y0);
    ext.reverse();
    ext[pad..pad + n].to_vec()
}
