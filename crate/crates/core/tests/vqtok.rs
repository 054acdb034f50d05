use clef_core::nn::G;
use clef_core::rng::rng_from;
use clef_core::vqtok::{quantize, recon_loss, Codebook, MaskSchedule};
use clef_core::Profile;
use clef_grad::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn recon(s: &[f32], s_hat: &[f32], shape: &[usize], gamma: f64) -> f64 {
    let mut g = G::new();
    let a = g.constant(Tensor::new(shape, s.to_vec()).unwrap());
    let b = g.constant(Tensor::new(shape, s_hat.to_vec()).unwrap());
    let l = recon_loss(&mut g, a, b, gamma).unwrap();
    g.scalar(l)
}

#[test]
fn recon_identities() {
    let mut rng = rng_from(2);
    let s: Vec<f32> = (0..2 * 3 * 4 * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
    assert_eq!(recon(&s, &s, &[2, 3, 4, 5], 4.0), 0.0);
    let shifted: Vec<f32> = s.iter().map(|v| v + 0.25).collect();
    assert!((recon(&s, &shifted, &[2, 3, 4, 5], 4.0) - 0.25).abs() < 1e-6);
    assert!((recon(&s, &shifted, &[2, 3, 4, 5], 0.0) - 0.25).abs() < 1e-6);
    assert_eq!(recon(&[1.0, -1.0], &[0.0, 0.0], &[2, 1, 1], 4.0), 4.0);
    let short = Tensor::new(&[2, 1, 1], vec![0.0f32; 2]).unwrap();
    let long = Tensor::new(&[3, 1, 1], vec![0.0f32; 3]).unwrap();
    let mut g = G::new();
    let (a, b) = (g.constant(short), g.constant(long));
    assert!(recon_loss(&mut g, a, b, 4.0).is_err());
}

/// Exhaustive scan in double precision; the first minimum wins.
fn brute_force(rows: &[Vec<f32>], cb: &Codebook) -> Vec<usize> {
    rows.iter()
        .map(|r| {
            let dist = |k: usize| -> f64 { r.iter().zip(cb.entry(k)).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum() };
            (0..cb.k).fold(0, |best, k| if dist(k) < dist(best) { k } else { best })
        })
        .collect()
}

fn vq_instance(seed: u64) -> (Codebook, Vec<f32>, usize, usize) {
    let mut rng = rng_from(seed);
    let k = rng.random_range(2..=64);
    let d = rng.random_range(1..=8);
    let (h, w) = (rng.random_range(1..=4), rng.random_range(1..=8));
    let mut entries: Vec<f32> = (0..k * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    // duplicate entries force exact ties
    for _ in 0..k / 4 {
        let (a, b) = (rng.random_range(0..k), rng.random_range(0..k));
        let src = entries[a * d..(a + 1) * d].to_vec();
        entries[b * d..(b + 1) * d].copy_from_slice(&src);
    }
    let cb = Codebook::new(k, d, entries).unwrap();
    let mut lat: Vec<f32> = (0..d * h * w).map(|_| rng.random_range(-1.2..1.2)).collect();
    let n = h * w;
    let pos = rng.random_range(0..n);
    let e = rng.random_range(0..k);
    for j in 0..d {
        lat[j * n + pos] = cb.entry(e)[j];
    }
    (cb, lat, h, w)
}

#[test]
fn quantize_matches_brute_force() {
    for seed in 0..100 {
        let (cb, lat, h, w) = vq_instance(seed);
        let n = h * w;
        let rows: Vec<Vec<f32>> = (0..n).map(|i| (0..cb.d).map(|j| lat[j * n + i]).collect()).collect();
        let grid = quantize(&lat, h, w, &cb).unwrap();
        assert_eq!(grid.indices, brute_force(&rows, &cb), "instance {seed}");
        for (i, &k) in grid.indices.iter().enumerate() {
            for j in 0..cb.d {
                assert_eq!(grid.quantized[j * n + i], cb.entry(k)[j]);
            }
        }
    }
}

/// Binomial 99% interval half-width for `n` draws at rate `p`.
fn ci99(p: f64, n: f64) -> f64 {
    2.576 * (p * (1.0 - p) / n).sqrt()
}

#[test]
fn ramped_mask_rates_hit_targets() {
    let p = Profile::desk();
    let s = MaskSchedule::from_profile(&p).unwrap();
    let avail = vec![true; p.cohort.channels.len()];
    let mut rng = rng_from(21);
    let n = 100_000;
    let (mut restricted, mut trials, mut dropped) = (0usize, 0usize, 0usize);
    for _ in 0..n {
        let draw = s.sample(s.ramp_steps, &avail, &mut rng);
        let base = if draw.psg_restricted { s.psg_subset.len() } else { avail.len() };
        restricted += draw.psg_restricted as usize;
        trials += base;
        dropped += base - draw.keep.iter().filter(|&&k| k).count();
    }
    let rate = restricted as f64 / n as f64;
    assert!((rate - s.p_psg).abs() <= ci99(s.p_psg, n as f64), "psg rate {rate}");
    let drop = dropped as f64 / trials as f64;
    assert!((drop - s.p_drop).abs() <= ci99(s.p_drop, trials as f64), "drop rate {drop}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn quantize_is_idempotent(seed in any::<u64>()) {
        let (cb, lat, h, w) = vq_instance(seed);
        let a = quantize(&lat, h, w, &cb).unwrap();
        let b = quantize(&a.quantized, h, w, &cb).unwrap();
        prop_assert_eq!(a.indices, b.indices);
    }

    #[test]
    fn mask_rates_never_decrease(p_psg in 0.0f64..1.0, p_drop in 0.0f64..1.0, ramp in 1u64..500, a in 0u64..1000, b in 0u64..1000) {
        let s = MaskSchedule { p_psg, p_drop, ramp_steps: ramp, psg_subset: vec![0] };
        let (lo, hi) = (a.min(b), a.max(b));
        let (x, y) = (s.effective(lo), s.effective(hi));
        prop_assert!(x.0 <= y.0 && x.1 <= y.1);
        prop_assert!(y.0 <= p_psg && y.1 <= p_drop);
    }
}
