use clef_core::align::*;
use clef_core::bench::{default_tasks, rules_from, Axis};
use clef_core::cohortgen::generate_cohort;
use clef_core::nn::{Ctx, Store, G};
use clef_core::rng::rng_from;
use clef_core::Profile;
use clef_grad::Tensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn loss_of(a: &[f32], b: &[f32], n: usize, d: usize, tau: f64, presence: Option<&[bool]>) -> (f64, bool) {
    let mut g = G::new();
    let av = g.constant(Tensor::new(&[n, d], a.to_vec()).unwrap());
    let bv = g.constant(Tensor::new(&[n, d], b.to_vec()).unwrap());
    let (l, ok) = match presence {
        Some(p) => clip_loss(&mut g, av, bv, tau, p).unwrap(),
        None => (clip_loss_rows(&mut g, av, bv, tau).unwrap(), true),
    };
    (g.scalar(l) as f64, ok)
}

fn random(n: usize, rng: &mut impl Rng) -> Vec<f32> {
    (0..n).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect()
}

#[test]
fn single_pair_has_zero_loss() {
    let (l, _) = loss_of(&[0.3, -1.0, 2.0], &[1.0, 1.0, 0.0], 1, 3, 0.07, None);
    assert_eq!(l, 0.0);
}

#[test]
fn orthonormal_pair_hand_value() {
    let e = [1.0, 0.0, 0.0, 1.0];
    let (l, _) = loss_of(&e, &e, 2, 2, 1.0, None);
    let oracle = (1.0 + (-1f64).exp()).ln();
    assert!((l - oracle).abs() < 1e-6, "{l} vs {oracle}");
}

#[test]
fn absent_batch_is_flagged() {
    let mut rng = rng_from(0);
    let a = random(12, &mut rng);
    let (l, ok) = loss_of(&a, &a, 3, 4, 0.07, Some(&[false; 3]));
    assert_eq!(l, 0.0);
    assert!(!ok);
}

#[test]
fn duplicate_codes_collapse() {
    let cfg = Profile::desk().align;
    let a = EhrInput::assemble(1, 0, 2, vec![5, 3, 3, 5], vec![7, 1, 1], &cfg).unwrap();
    let b = EhrInput::assemble(1, 0, 2, vec![3, 5], vec![1, 7], &cfg).unwrap();
    assert_eq!(a, b);
    assert!(EhrInput::assemble(1, 0, 2, vec![cfg.n_conditions], vec![], &cfg).is_err());
}

fn encoders() -> (Store, ReportEncoder, EhrEncoder, Profile) {
    let p = Profile::desk();
    let mut store = Store::new();
    let mut rng = rng_from(3);
    let rep = ReportEncoder::new(&mut store, &p.align, &mut rng);
    let ehr = EhrEncoder::new(&mut store, &p.align, &mut rng);
    (store, rep, ehr, p)
}

fn rows(g: &G, v: clef_grad::Var) -> Vec<f32> {
    g.value(v).data().to_vec()
}

#[test]
fn padding_does_not_change_embeddings() {
    let (store, rep, ehr, p) = encoders();
    let prov = HashedNgramProvider::from_config(&p.align);
    let short = prov.embed("diffuse beta");
    let long = prov.embed("there is generalized slowing with intermittent diffuse beta activity seen");
    let mut g = G::new();
    let alone = rep.forward(&mut g, &store, &[&short], &mut Ctx::eval()).unwrap();
    let both = rep.forward(&mut g, &store, &[&short, &long], &mut Ctx::eval()).unwrap();
    let d = p.align.proj_dim;
    for (x, y) in rows(&g, alone).iter().zip(&rows(&g, both)[..d]) {
        assert!((x - y).abs() < 1e-5);
    }
    let few = EhrInput::assemble(2, 1, 0, vec![4], vec![], &p.align).unwrap();
    let many = EhrInput::assemble(0, 0, 1, vec![1, 2, 3, 9], vec![2, 6, 8], &p.align).unwrap();
    let alone = ehr.forward(&mut g, &store, &[&few], &mut Ctx::eval()).unwrap();
    let both = ehr.forward(&mut g, &store, &[&many, &few], &mut Ctx::eval()).unwrap();
    for (x, y) in rows(&g, alone).iter().zip(&rows(&g, both)[d..]) {
        assert!((x - y).abs() < 1e-5);
    }
}

#[test]
fn ehr_code_order_is_irrelevant() {
    let (store, _, ehr, p) = encoders();
    let a = EhrInput::assemble(1, 1, 1, vec![9, 2, 4], vec![3, 0], &p.align).unwrap();
    let b = EhrInput::assemble(1, 1, 1, vec![4, 9, 2, 2], vec![0, 3], &p.align).unwrap();
    let mut g = G::new();
    let x = ehr.forward(&mut g, &store, &[&a], &mut Ctx::eval()).unwrap();
    let y = ehr.forward(&mut g, &store, &[&b], &mut Ctx::eval()).unwrap();
    assert_eq!(rows(&g, x), rows(&g, y));
}

#[test]
fn provider_separates_phrases() {
    let p = Profile::desk();
    let prov = HashedNgramProvider::from_config(&p.align);
    let mut phrases: Vec<String> = p.cohort.phenotypes.iter().flat_map(|ph| ph.report_phrases.clone()).collect();
    phrases.sort();
    phrases.dedup();
    let feats: Vec<TextFeatures> = phrases.iter().map(|s| prov.embed(s)).collect();
    for i in 0..feats.len() {
        assert_eq!(prov.embed(&phrases[i]), feats[i]);
        for j in 0..i {
            assert_ne!(feats[i], feats[j], "{} / {}", phrases[i], phrases[j]);
        }
    }
}

#[test]
fn holdout_removes_every_trace() {
    let p = Profile::desk();
    let c = generate_cohort(&p.cohort, p.seed).unwrap();
    let tasks = default_tasks(&p.cohort);
    let held: Vec<String> = tasks
        .iter()
        .filter(|t| t.axis != Axis::Feature && clef_core::bench::task_effect_db(t, &p.cohort) < 3.0)
        .map(|t| t.id.clone())
        .collect();
    assert!(!held.is_empty());
    let terms = concept_holdout_filter(&tasks, &held, &p.cohort).unwrap();
    let rules = rules_from(&p.bench);
    let ids: Vec<u32> = c.sessions.iter().map(|s| s.session_id).collect();
    let prov = HashedNgramProvider::from_config(&p.align);
    let texts = |s: &clef_core::cohortgen::SessionMeta| s.report.clone();
    let samples = build_samples(&c, &ids, &texts, &prov, &terms, &rules, &p.align).unwrap();
    for s in &samples {
        assert!(s.ehr.conditions.iter().all(|x| !terms.conditions.contains(x)));
        assert!(s.ehr.medications.iter().all(|x| !terms.medications.contains(x)));
    }
    for s in c.sessions.iter().filter_map(|s| s.report.as_deref()) {
        let clean = terms.scrub(s).to_lowercase();
        for ph in &terms.phrases {
            assert!(!clean.contains(&ph.to_lowercase()), "{ph:?} survives in {clean}");
        }
    }
    assert!(concept_holdout_filter(&tasks, &["nope".into()], &p.cohort).is_err());
}

#[test]
fn retrieval_extremes() {
    let mut rng = rng_from(1);
    let q: Vec<Vec<f32>> = (0..100).map(|_| random(16, &mut rng)).collect();
    assert_eq!(retrieval_top1(&q, &q, 64, 5, 0), 1.0);
    let other: Vec<Vec<f32>> = (0..100).map(|_| random(16, &mut rng)).collect();
    assert!(retrieval_top1(&q, &other, 64, 20, 0) < 0.1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn batch_order_is_irrelevant(seed in any::<u64>(), n in 2usize..8) {
        let mut rng = rng_from(seed);
        let d = 5;
        let a = random(n * d, &mut rng);
        let b = random(n * d, &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let shuffle = |x: &[f32]| -> Vec<f32> { perm.iter().flat_map(|&i| x[i * d..(i + 1) * d].to_vec()).collect() };
        let (l0, _) = loss_of(&a, &b, n, d, 0.1, None);
        let (l1, _) = loss_of(&shuffle(&a), &shuffle(&b), n, d, 0.1, None);
        prop_assert!((l0 - l1).abs() < 1e-4 * l0.max(1.0));
    }

    #[test]
    fn absent_rows_drop_out(seed in any::<u64>(), n in 2usize..8) {
        let mut rng = rng_from(seed);
        let d = 4;
        let a = random(n * d, &mut rng);
        let b = random(n * d, &mut rng);
        let presence: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.6).collect();
        let keep: Vec<usize> = (0..n).filter(|&i| presence[i]).collect();
        let (l, ok) = loss_of(&a, &b, n, d, 0.07, Some(&presence));
        prop_assert_eq!(ok, !keep.is_empty());
        if ok {
            let pick = |x: &[f32]| -> Vec<f32> { keep.iter().flat_map(|&i| x[i * d..(i + 1) * d].to_vec()).collect() };
            let (r, _) = loss_of(&pick(&a), &pick(&b), keep.len(), d, 0.07, None);
            prop_assert!((l - r).abs() < 1e-6, "{} vs {}", l, r);
        }
    }
}
