//! Discrete prolate spheroidal sequences from the tridiagonal commuting
//! operator, solved by Sturm bisection and inverse iteration.

use std::f64::consts::PI;

use crate::error::{config, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TaperSet {
    /// K rows of length L, each unit norm.
    pub tapers: Vec<Vec<f64>>,
    /// Spectral concentration of each row, descending.
    pub concentrations: Vec<f64>,
    pub nw: f64,
}

impl TaperSet {
    pub fn len(&self) -> usize {
        self.tapers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tapers.is_empty()
    }

    pub fn window(&self) -> usize {
        self.tapers.first().map_or(0, |t| t.len())
    }
}

struct Tridiag {
    diag: Vec<f64>,
    off: Vec<f64>,
}

impl Tridiag {
    fn slepian(n: usize, w: f64) -> Self {
        let c = (2.0 * PI * w).cos();
        let diag = (0..n)
            .map(|i| {
                let t = (n as f64 - 1.0 - 2.0 * i as f64) / 2.0;
                t * t * c
            })
            .collect();
        let off = (1..n).map(|i| i as f64 * (n - i) as f64 / 2.0).collect();
        Self { diag, off }
    }

    /// Number of eigenvalues strictly below `x`.
    fn count_below(&self, x: f64) -> usize {
        let mut count = 0;
        let mut q = self.diag[0] - x;
        if q < 0.0 {
            count += 1;
        }
        for i in 1..self.diag.len() {
            let e = self.off[i - 1];
            let prev = if q == 0.0 { f64::EPSILON * e.abs().max(1.0) } else { q };
            q = self.diag[i] - x - e * e / prev;
            if q < 0.0 {
                count += 1;
            }
        }
        count
    }

    fn bounds(&self) -> (f64, f64) {
        let n = self.diag.len();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..n {
            let r = if i > 0 { self.off[i - 1].abs() } else { 0.0 } + if i + 1 < n { self.off[i].abs() } else { 0.0 };
            lo = lo.min(self.diag[i] - r);
            hi = hi.max(self.diag[i] + r);
        }
        (lo, hi)
    }

    /// The `j`-th smallest eigenvalue (0-based).
    fn eigenvalue(&self, j: usize) -> f64 {
        let (mut lo, mut hi) = self.bounds();
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.count_below(mid) > j {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// Solves (T − shift·I) x = b with partial pivoting.
    fn solve_shifted(&self, shift: f64, b: &[f64]) -> Vec<f64> {
        let n = self.diag.len();
        // Banded LU with row swaps: upper triangle can gain a second
        // superdiagonal.
        let mut d: Vec<f64> = self.diag.iter().map(|v| v - shift).collect();
        let mut du: Vec<f64> = self.off.clone();
        let mut dl: Vec<f64> = self.off.clone();
        let mut du2 = vec![0.0; n.saturating_sub(2)];
        let mut x = b.to_vec();
        let tiny = 1e-300;
        for i in 0..n - 1 {
            if d[i].abs() >= dl[i].abs() {
                let piv = if d[i] == 0.0 { tiny } else { d[i] };
                d[i] = piv;
                let m = dl[i] / piv;
                d[i + 1] -= m * du[i];
                x[i + 1] -= m * x[i];
                dl[i] = m;
            } else {
                let m = d[i] / dl[i];
                d[i] = dl[i];
                let tmp = du[i];
                du[i] = d[i + 1];
                d[i + 1] = tmp - m * d[i + 1];
                if i + 1 < n - 1 {
                    du2[i] = du[i + 1];
                    du[i + 1] *= -m;
                }
                x.swap(i, i + 1);
                x[i + 1] -= m * x[i];
                dl[i] = m;
            }
        }
        if d[n - 1] == 0.0 {
            d[n - 1] = tiny;
        }
        let mut out = vec![0.0; n];
        for i in (0..n).rev() {
            let mut s = x[i];
            if i + 1 < n {
                s -= du[i] * out[i + 1];
            }
            if i + 2 < n {
                s -= du2[i] * out[i + 2];
            }
            out[i] = s / d[i];
        }
        out
    }
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

/// Fraction of a taper's energy inside [−W, W], using the sinc kernel.
pub fn concentration(v: &[f64], w: f64) -> f64 {
    let n = v.len();
    let mut total = 0.0;
    for lag in 0..n {
        let r: f64 = (0..n - lag).map(|i| v[i] * v[i + lag]).sum();
        let k = if lag == 0 {
            2.0 * w
        } else {
            (2.0 * PI * w * lag as f64).sin() / (PI * lag as f64)
        };
        total += if lag == 0 { r * k } else { 2.0 * r * k };
    }
    total
}

/// DPSS tapers of `length` samples whose concentration exceeds `threshold`,
/// at most `k_max` of them.
pub fn compute_dpss(length: usize, nw: f64, k_max: usize, threshold: f64) -> Result<TaperSet> {
    if length < 8 {
        return config(format!("taper length {length} below 8"));
    }
    if !(nw > 0.0 && nw < length as f64 / 2.0) {
        return config(format!("nw {nw} outside (0, {})", length as f64 / 2.0));
    }
    let w = nw / length as f64;
    let t = Tridiag::slepian(length, w);
    let mut tapers: Vec<Vec<f64>> = Vec::new();
    let mut concentrations = Vec::new();
    for k in 0..k_max.min(length) {
        let lambda = t.eigenvalue(length - 1 - k);
        let gap = 1e-10 * lambda.abs().max(1.0);
        let mut v: Vec<f64> = (0..length).map(|i| 1.0 + 0.01 * ((i * 7919 + k * 104729) % 97) as f64).collect();
        for _ in 0..3 {
            v = t.solve_shifted(lambda + gap, &v);
            normalize(&mut v);
        }
        for prev in &tapers {
            let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(prev).for_each(|(a, b)| *a -= dot * b);
        }
        normalize(&mut v);
        if k % 2 == 0 {
            if v.iter().sum::<f64>() < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
        } else {
            let first_half: f64 = v[..length / 2].iter().sum();
            if first_half < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
        }
        let c = concentration(&v, w);
        if c <= threshold {
            break;
        }
        tapers.push(v);
        concentrations.push(c);
    }
    Ok(TaperSet {
        tapers,
        concentrations,
        nw,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sturm_count_on_small_matrix() {
        let t = Tridiag {
            diag: vec![2.0, 2.0, 2.0],
            off: vec![-1.0, -1.0],
        };
        // Eigenvalues 2 - sqrt2, 2, 2 + sqrt2.
        assert!((t.eigenvalue(0) - (2.0 - 2f64.sqrt())).abs() < 1e-12);
        assert!((t.eigenvalue(1) - 2.0).abs() < 1e-12);
        assert!((t.eigenvalue(2) - (2.0 + 2f64.sqrt())).abs() < 1e-12);
        let x = t.solve_shifted(0.5, &[1.0, 0.0, 1.0]);
        let r = [1.5 * x[0] - x[1], -x[0] + 1.5 * x[1] - x[2], -x[1] + 1.5 * x[2]];
        assert!((r[0] - 1.0).abs() < 1e-12 && r[1].abs() < 1e-12 && (r[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn short_tapers_are_eigenvectors() {
        let ts = compute_dpss(64, 2.5, 4, 0.0).unwrap();
        let w = 2.5 / 64.0;
        let t = Tridiag::slepian(64, w);
        for v in &ts.tapers {
            let mut tv = vec![0.0; 64];
            for i in 0..64 {
                tv[i] = t.diag[i] * v[i];
                if i > 0 {
                    tv[i] += t.off[i - 1] * v[i - 1];
                }
                if i + 1 < 64 {
                    tv[i] += t.off[i] * v[i + 1];
                }
            }
            let rq: f64 = tv.iter().zip(v).map(|(a, b)| a * b).sum();
            let resid: f64 = tv.iter().zip(v).map(|(a, b)| (a - rq * b).powi(2)).sum::<f64>().sqrt();
            assert!(resid < 1e-8 * rq.abs().max(1.0), "{resid}");
        }
        assert!(ts.concentrations.windows(2).all(|w| w[0] >= w[1]));
    }
}
