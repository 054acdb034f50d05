use clef_core::mim::{masked_accuracy, sample_mask_plan, sample_mask_ratio, train_mim, MaskPlan, MimDims, MimModel, MimWindow, Slot};
use clef_core::nn::{Ctx, G};
use clef_core::rng::rng_from;
use clef_core::Profile;
use clef_grad::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn dims() -> MimDims {
    MimDims {
        k: 8,
        grid_h: 2,
        grid_w: 4,
        patch_dim: 4,
    }
}

fn small_cfg() -> clef_core::profile::MimConfig {
    let mut c = Profile::desk().mim;
    c.dim = 32;
    c.heads = 4;
    c.dec_dim = 32;
    c.dec_heads = 4;
    c.batch = 16;
    c.steps = 250;
    c.warmup_steps = 10;
    c.lr = 2e-3;
    c
}

/// Each grid row repeats one code, so a masked code follows from any visible
/// token in its row.
fn row_windows(n: usize, seed: u64) -> Vec<MimWindow> {
    let d = dims();
    let mut rng = rng_from(seed);
    (0..n)
        .map(|_| {
            let mut tokens = Vec::new();
            for _ in 0..d.grid_h {
                let start = rng.random_range(0..d.k);
                tokens.extend((0..d.grid_w).map(|_| start));
            }
            MimWindow {
                patches: (0..d.tokens() * d.patch_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                valid: vec![true; d.tokens()],
                tokens,
            }
        })
        .collect()
}

#[test]
fn truncated_ratio_mean_matches_quadrature() {
    let (mu, sigma, lo, hi) = (0.55f64, 0.15f64, 0.25f64, 1.0f64);
    let steps = 200_000;
    let dx = (hi - lo) / steps as f64;
    let (mut z, mut m) = (0.0, 0.0);
    for i in 0..steps {
        let x = lo + (i as f64 + 0.5) * dx;
        let p = (-(x - mu).powi(2) / (2.0 * sigma * sigma)).exp();
        z += p;
        m += p * x;
    }
    let want = m / z;
    let mut rng = rng_from(11);
    let n = 100_000;
    let draws: Vec<f64> = (0..n).map(|_| sample_mask_ratio(mu, sigma, [lo, hi], &mut rng)).collect();
    assert!(draws.iter().all(|r| (lo..=hi).contains(r)));
    let mean = draws.iter().sum::<f64>() / n as f64;
    assert!((mean - want).abs() < 0.002, "{mean} vs {want}");
}

#[test]
fn uniform_logits_give_log_k() {
    let mut g = G::new();
    let logits = g.constant(Tensor::zeros(&[5, 64]));
    let loss = clef_core::mim::mim_loss(&mut g, logits, &[0, 3, 7, 63, 12], 0.1).unwrap();
    assert!((g.scalar(loss) - 64f64.ln()).abs() < 1e-5);
}

#[test]
fn smoothed_loss_matches_hand_value() {
    let mut g = G::new();
    let logits = g.constant(Tensor::new(&[1, 3], vec![2.0f32, 0.0, -1.0]).unwrap());
    let loss = clef_core::mim::mim_loss(&mut g, logits, &[0], 0.1).unwrap();
    let lse = (2f64.exp() + 1.0 + (-1f64).exp()).ln();
    let logp = [2.0 - lse, -lse, -1.0 - lse];
    let eps = 0.1;
    let want = -((1.0 - eps) * logp[0] + eps / 3.0 * logp.iter().sum::<f64>());
    assert!((g.scalar(loss) - want).abs() < 1e-5);
}

#[test]
fn pool_skips_proxy_and_mask_slots() {
    let cfg = small_cfg();
    let m = MimModel::new(&cfg, dims(), &mut rng_from(3));
    let w = row_windows(1, 4).remove(0);
    let plan = MaskPlan {
        ratio: 0.5,
        masked: vec![0, 1, 2, 5],
        dropped: vec![1],
    };
    let mut g = G::new();
    let out = m.enc.forward(&mut g, &m.store, std::slice::from_ref(&w), std::slice::from_ref(&plan), &mut Ctx::eval()).unwrap();
    assert_eq!(out.slots[0][0], Slot::Proxy);
    assert_eq!(out.len, 1 + 8 - 1);
    let pm = out.pool_mask(false);
    let visible = out.slots[0].iter().filter(|s| matches!(s, Slot::Visible(_))).count();
    assert_eq!(pm.iter().filter(|&&b| b).count(), visible);
    assert_eq!(visible, 4);
}

#[test]
fn learns_row_structure() {
    let cfg = small_cfg();
    let train = row_windows(512, 1);
    let held = row_windows(128, 2);
    let (tr, log) = train_mim(&cfg, dims(), 7, &train, |_| {}).unwrap();
    let first: f64 = log[..10].iter().map(|l| l.loss).sum::<f64>() / 10.0;
    let last: f64 = log[log.len() - 10..].iter().map(|l| l.loss).sum::<f64>() / 10.0;
    assert!(last < first, "{first} -> {last}");
    let acc = masked_accuracy(&tr.ema_model(), &held, 128, 9).unwrap();
    assert!(acc > 3.0 / 8.0, "masked accuracy {acc}");
}

proptest! {
    #[test]
    fn plan_sizes(n in 1usize..200, mu in 0.3f64..0.9, r_drop in 0.0f64..0.9, seed in any::<u64>()) {
        let mut rng = rng_from(seed);
        let p = sample_mask_plan(n, mu, 0.15, [0.25, 1.0], r_drop, &mut rng);
        prop_assert_eq!(p.masked.len(), ((p.ratio * n as f64).ceil() as usize).min(n));
        prop_assert_eq!(p.dropped.len(), (r_drop * p.masked.len() as f64).floor() as usize);
        prop_assert!(p.dropped.iter().all(|d| p.masked.binary_search(d).is_ok()));
        prop_assert!(p.masked.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn padding_tail_permutation_is_invisible(seed in any::<u64>(), cut in 1usize..7) {
        let cfg = small_cfg();
        let m = MimModel::new(&cfg, dims(), &mut rng_from(5));
        let mut w = row_windows(1, seed).remove(0);
        for v in &mut w.valid[cut..] {
            *v = false;
        }
        let a = m.enc.embed_windows(&m.store, std::slice::from_ref(&w)).unwrap();
        w.tokens[cut..].reverse();
        let p = dims().patch_dim;
        w.patches[cut * p..].reverse();
        let b = m.enc.embed_windows(&m.store, &[w]).unwrap();
        prop_assert_eq!(a, b);
    }
}
