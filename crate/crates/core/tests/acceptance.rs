//! Acceptance checks. Runs every criterion in order, prints one PASS/FAIL
//! line each and exits nonzero if any failed.
//!
//! `cargo test --release -p clef-core --test acceptance`

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use clef_core::align::{self, clip_loss_rows, concept_holdout_filter, AlignData, AlignLosses, AlignModel, AlignTrainer, HoldoutTerms};
use clef_core::bench::{self, audit_table, auroc, build_table, patient_split, rules_from, Axis, Split, TaskResult, TaskSpec};
use clef_core::cohortgen::{generate_cohort, Cohort, RawSession};
use clef_core::dsp::{compute_dpss, Spectrogram, SpectrogramEngine};
use clef_core::mim::{self, masked_accuracy, sample_mask_ratio, MimDims};
use clef_core::nn::{Ctx, G};
use clef_core::rng::rng_from;
use clef_core::summarize::{default_questions, qa_consistency, Candidate, LlmClient, MockClient, Question, QuestionKind};
use clef_core::vqtok::{self, quantize, recon_loss, Codebook, MaskSchedule, TokLosses, TokenCache};
use clef_core::{pipeline as pl, Profile};
use clef_grad::gradcheck::{primitive_names, primitive_suite};
use clef_grad::{Checkpoint, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};

type Check = Result<String, Box<dyn std::error::Error>>;

macro_rules! need {
    ($cond:expr, $($fmt:tt)*) => {
        if !$cond {
            return Err(format!($($fmt)*).into());
        }
    };
}

fn mins(d: Duration) -> f64 {
    d.as_secs_f64() / 60.0
}

fn gradient_suite() -> Check {
    let t = Instant::now();
    let rs = primitive_suite(11)?;
    let took = t.elapsed();
    need!(rs.len() == primitive_names().len(), "{} of {} primitives checked", rs.len(), primitive_names().len());
    let worst = rs.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    for r in &rs {
        need!(r.shapes_checked >= 3, "{}: {} shapes", r.name, r.shapes_checked);
        need!(r.max_rel_err <= 1e-4, "{}: rel err {:.2e}", r.name, r.max_rel_err);
    }
    need!(took.as_secs() < 60, "took {:.1}s", took.as_secs_f64());
    Ok(format!("{} primitives, worst rel err {worst:.2e}, {:.1}s", rs.len(), took.as_secs_f64()))
}

fn raw(samples: Vec<Vec<f32>>) -> RawSession {
    RawSession {
        session_id: 0,
        patient_id: 0,
        sample_rate: 200.0,
        channel_available: vec![true; samples.len()],
        samples,
    }
}

fn dsp_suite() -> Check {
    let t = Instant::now();
    let tapers = compute_dpss(800, 2.0, 8, 0.9)?;
    need!(tapers.len() == 3, "{} tapers retained", tapers.len());
    let mut gram_err: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let g: f64 = tapers.tapers[i].iter().zip(&tapers.tapers[j]).map(|(a, b)| a * b).sum();
            gram_err = gram_err.max((g - (i == j) as u8 as f64).abs());
        }
    }
    need!(gram_err < 1e-8, "gram error {gram_err:.2e}");

    let cfg = Profile::named("paper-base")?.dsp;
    let engine = SpectrogramEngine::new(&cfg)?;
    let sine: Vec<f32> = (0..20_000).map(|n| (2.0 * PI * 8.0 * n as f64 / 200.0).sin() as f32).collect();
    let s = engine.transform(&raw(vec![sine]))?;
    for w in 4..s.frames - 4 {
        let best = (0..s.bins).max_by(|&a, &b| s.at(0, a, w).total_cmp(&s.at(0, b, w))).unwrap_or(0);
        need!(best == 32, "8 Hz peak at bin {best} in frame {w}");
    }

    let sigma = 3.0;
    let mut rng = rng_from(4);
    let normal = Normal::new(0.0, sigma)?;
    let noise: Vec<f32> = (0..40_000).map(|_| normal.sample(&mut rng) as f32).collect();
    let s = engine.transform(&raw(vec![noise]))?;
    let level = s.values.iter().map(|&v| 10f64.powf(v as f64 * 4.0)).sum::<f64>() / s.values.len() as f64;
    let want = sigma * sigma / 200.0;
    let rel = (level / want - 1.0).abs();
    need!(rel < 0.1, "white-noise level off by {:.1}%", rel * 100.0);

    let frames = engine.transform(&raw(vec![vec![0.0; 1280 * 200]]))?.frames;
    need!(frames == 2048, "1280 s gives {frames} frames");
    need!(t.elapsed().as_secs() < 60, "took {:.1}s", t.elapsed().as_secs_f64());
    Ok(format!(
        "K=3, gram err {gram_err:.1e}, 8 Hz at bin 32, noise level {:+.1}%, 2048 frames, {:.1}s",
        (level / want - 1.0) * 100.0,
        t.elapsed().as_secs_f64()
    ))
}

fn scalar_of(f: impl FnOnce(&mut G) -> clef_core::Result<clef_grad::Var>) -> Result<f64, Box<dyn std::error::Error>> {
    let mut g = G::new();
    let v = f(&mut g)?;
    Ok(g.scalar(v))
}

fn constant(g: &mut G, shape: &[usize], v: &[f32]) -> clef_core::Result<clef_grad::Var> {
    Ok(g.constant(Tensor::new(shape, v.to_vec())?))
}

fn loss_identities() -> Check {
    let mut rng = rng_from(2);
    let sh = [2, 3, 4, 5];
    let s: Vec<f32> = (0..120).map(|_| rng.random_range(-1.0..1.0)).collect();
    let shifted: Vec<f32> = s.iter().map(|v| v + 0.25).collect();
    let rec = |a: &[f32], b: &[f32], shape: &[usize], gamma: f64| {
        scalar_of(|g| {
            let x = constant(g, shape, a)?;
            let y = constant(g, shape, b)?;
            recon_loss(g, x, y, gamma)
        })
    };
    let same = rec(&s, &s, &sh, 4.0)?;
    need!(same == 0.0, "recon_loss(S, S) = {same}");
    // equal losses at gamma 0 and 4 mean the differential term vanished
    let (off0, off4) = (rec(&s, &shifted, &sh, 0.0)?, rec(&s, &shifted, &sh, 4.0)?);
    need!((off0 - 0.25).abs() < 1e-6 && (off4 - off0).abs() < 1e-6, "offset case {off0} / {off4}");
    let hand = rec(&[1.0, -1.0], &[0.0, 0.0], &[2, 1, 1], 4.0)?;
    need!(hand == 4.0, "C=2 hand case {hand}");
    let single = scalar_of(|g| {
        let a = constant(g, &[1, 3], &[0.3, -1.0, 2.0])?;
        let b = constant(g, &[1, 3], &[1.0, 1.0, 0.0])?;
        clip_loss_rows(g, a, b, 0.07)
    })?;
    need!(single == 0.0, "B=1 contrastive loss {single}");
    let ortho = scalar_of(|g| {
        let a = constant(g, &[2, 2], &[1.0, 0.0, 0.0, 1.0])?;
        let b = constant(g, &[2, 2], &[1.0, 0.0, 0.0, 1.0])?;
        clip_loss_rows(g, a, b, 1.0)
    })?;
    let want = (1.0 + (-1f64).exp()).ln();
    need!((ortho - want).abs() < 1e-6, "orthonormal case {ortho} vs {want}");
    let uniform = scalar_of(|g| {
        let l = constant(g, &[5, 64], &[0.0; 320])?;
        mim::mim_loss(g, l, &[0, 3, 7, 63, 12], 0.1)
    })?;
    need!((uniform - 64f64.ln()).abs() < 1e-6, "uniform logits {uniform} vs ln 64");
    Ok(format!("recon 0 / offset {off4:.6} / hand {hand}; clip {single} / {ortho:.7}; mim {uniform:.7}"))
}

fn vq_oracle() -> Check {
    let mut ties = 0;
    for seed in 0..100u64 {
        let mut rng = rng_from(1000 + seed);
        let k = rng.random_range(2..=64);
        let d = rng.random_range(1..=8);
        let (h, w) = (rng.random_range(1..=4), rng.random_range(1..=8));
        let mut entries: Vec<f32> = (0..k * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        for _ in 0..k / 4 {
            let (a, b) = (rng.random_range(0..k), rng.random_range(0..k));
            let src = entries[a * d..(a + 1) * d].to_vec();
            entries[b * d..(b + 1) * d].copy_from_slice(&src);
        }
        let cb = Codebook::new(k, d, entries)?;
        let n = h * w;
        let mut lat: Vec<f32> = (0..d * n).map(|_| rng.random_range(-1.2..1.2)).collect();
        let e = rng.random_range(0..k);
        for j in 0..d {
            lat[j * n] = cb.entry(e)[j];
        }
        let grid = quantize(&lat, h, w, &cb)?;
        for i in 0..n {
            let dist = |c: usize| -> f64 { (0..d).map(|j| (lat[j * n + i] as f64 - cb.entry(c)[j] as f64).powi(2)).sum() };
            let best = (0..k).fold(0, |b, c| if dist(c) < dist(b) { c } else { b });
            ties += (0..k).filter(|&c| c != best && dist(c) == dist(best)).count().min(1);
            need!(grid.indices[i] == best, "instance {seed} position {i}: {} vs {best}", grid.indices[i]);
        }
    }
    Ok(format!("100 instances agree with the exhaustive scan ({ties} positions had exact ties)"))
}

fn mask_statistics() -> Check {
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
    let quad = m / z;
    let mut rng = rng_from(11);
    let n = 100_000;
    let mean = (0..n).map(|_| sample_mask_ratio(mu, sigma, [lo, hi], &mut rng)).sum::<f64>() / n as f64;
    need!((mean - quad).abs() <= 0.01, "ratio mean {mean} vs quadrature {quad}");

    let p = Profile::desk();
    let s = MaskSchedule::from_profile(&p)?;
    let avail = vec![true; p.cohort.channels.len()];
    let (mut restricted, mut trials, mut dropped) = (0usize, 0usize, 0usize);
    for _ in 0..n {
        let draw = s.sample(s.ramp_steps, &avail, &mut rng);
        let base = if draw.psg_restricted { s.psg_subset.len() } else { avail.len() };
        restricted += draw.psg_restricted as usize;
        trials += base;
        dropped += base - draw.keep.iter().filter(|&&k| k).count();
    }
    let ci = |p: f64, n: usize| 2.576 * (p * (1.0 - p) / n as f64).sqrt();
    let (rate, drop) = (restricted as f64 / n as f64, dropped as f64 / trials as f64);
    need!((rate - s.p_psg).abs() <= ci(s.p_psg, n), "restriction rate {rate}");
    need!((drop - s.p_drop).abs() <= ci(s.p_drop, trials), "drop rate {drop}");
    Ok(format!("ratio mean {mean:.4} vs {quad:.4}; restriction {rate:.4} (0.3), drop {drop:.4} (0.1)"))
}

/// Every desk stage, shared by the training criteria.
struct Run {
    profile: Profile,
    cohort: Cohort,
    split: BTreeMap<u32, Split>,
    specs: Vec<Spectrogram>,
    caches: Vec<TokenCache>,
    train: Vec<u32>,
    texts: BTreeMap<u32, String>,
    tok_log: Vec<TokLosses>,
    mim_acc: f64,
    stage1: Checkpoint,
    stage1_time: Duration,
    align_init: AlignLosses,
    retrieval: f64,
    retrieval_n: usize,
    stage2_time: Duration,
    tasks: Vec<TaskSpec>,
    results: Vec<TaskResult>,
    total_time: Duration,
}

fn run_pipeline() -> Result<Run, Box<dyn std::error::Error>> {
    let t0 = Instant::now();
    let p = Profile::desk();
    let c = generate_cohort(&p.cohort, p.seed)?;
    let specs = pl::spectrograms(&p, &c)?;
    let split = pl::splits(&p, &c);
    let train = pl::sessions_in(&c, &split, &[Split::Train]);
    let train_specs: Vec<Spectrogram> = train.iter().map(|&i| specs[i as usize].clone()).collect();
    let (tt, tok_log) = vqtok::train_tokenizer(&p, &train_specs, |_| {})?;
    let caches = pl::tokenize_all(&tt.tok, &specs)?;
    let dims = MimDims::from_profile(&p);
    let in_train: BTreeSet<u32> = train.iter().copied().collect();
    let corpus = mim::Corpus::new(dims, &specs, &caches)?.filter(|w| in_train.contains(&w.session_id));
    let held = mim::Corpus::new(dims, &specs, &caches)?.filter(|w| !in_train.contains(&w.session_id));
    let (mt, _) = mim::train_mim(&p.mim, dims, p.seed, &corpus, |_| {})?;
    let recon = mt.ema_model();
    let mim_acc = masked_accuracy(&recon, &held, 200, 5)?;
    let stage1 = mt.model.checkpoint(&mt.ema, &mt.opt, &p.hash(), &tt.tok.codebook_snapshot().hash());
    let stage1_time = t0.elapsed();

    let t1 = Instant::now();
    let texts = pl::alignment_texts(&p, &c, &MockClient::new(&p.cohort))?;
    let samples = pl::alignment_samples(&p, &c, &train, &texts, &HoldoutTerms::default())?;
    let set = AlignData { dims, specs: &specs, caches: &caches, samples };
    let mut trainer = AlignTrainer::new(&p, &stage1, set.samples.len())?;
    let log = trainer.train(&set, |_| {})?;
    let aligned = trainer.ema_model();
    let (retrieval, retrieval_n) = retrieval(&p, &c, &split, &specs, &caches, &texts, &aligned)?;
    let stage2_time = t1.elapsed();

    let tasks = bench::default_tasks(&p.cohort);
    let tables = pl::task_tables(&p, &c, &tasks, &split)?;
    let e_recon = pl::table_embeddings(&p, &recon.enc, &recon.store, None, &specs, &caches, &tables)?;
    let e_align = pl::table_embeddings(&p, &aligned.enc, &aligned.store, None, &specs, &caches, &tables)?;
    let mut results = bench::benchmark_run("recon", &tables, &e_recon, &p.bench)?;
    results.extend(bench::benchmark_run("align", &tables, &e_align, &p.bench)?);
    Ok(Run {
        profile: p,
        cohort: c,
        split,
        specs,
        caches,
        train,
        texts,
        tok_log,
        mim_acc,
        stage1,
        stage1_time,
        align_init: log[0].losses.clone(),
        retrieval,
        retrieval_n,
        stage2_time,
        tasks,
        results,
        total_time: t0.elapsed(),
    })
}

/// EEG to EHR top-1 retrieval on validation and test sessions.
fn retrieval(
    p: &Profile,
    c: &Cohort,
    split: &BTreeMap<u32, Split>,
    specs: &[Spectrogram],
    caches: &[TokenCache],
    texts: &BTreeMap<u32, String>,
    model: &AlignModel,
) -> Result<(f64, usize), Box<dyn std::error::Error>> {
    let rest = pl::sessions_in(c, split, &[Split::Val, Split::Test]);
    let samples = pl::alignment_samples(p, c, &rest, texts, &HoldoutTerms::default())?;
    let emb = bench::SessionEmbedder::new(&model.enc, &model.store, p)?;
    let u = samples.iter().map(|s| emb.embed(&specs[s.index], &caches[s.index])).collect::<clef_core::Result<Vec<_>>>()?;
    let q = model.project_ehr(&u)?;
    let cands = model.embed_ehr(&samples.iter().map(|s| &s.ehr).collect::<Vec<_>>())?;
    Ok((align::retrieval_top1(&q, &cands, 64, 20, 1), samples.len()))
}

fn stage1_smoke(run: &Run) -> Check {
    let rec: Vec<f64> = run.tok_log.iter().take(200).map(|l| l.rec).collect();
    need!(rec.len() >= 20, "only {} tokenizer steps", rec.len());
    let head = rec[..10].iter().sum::<f64>() / 10.0;
    let tail = rec[rec.len() - 10..].iter().sum::<f64>() / 10.0;
    let drop = 1.0 - tail / head;
    need!(drop >= 0.30, "L_rec fell {:.1}% ({head:.3} -> {tail:.3})", drop * 100.0);
    let chance = 1.0 / run.profile.tokenizer.codebook_size as f64;
    need!(run.profile.mim.steps <= 300, "{} masked-modeling steps", run.profile.mim.steps);
    need!(run.mim_acc >= 5.0 * chance, "masked accuracy {:.3} vs chance {chance:.4}", run.mim_acc);
    need!(mins(run.stage1_time) < 20.0, "stage I took {:.1} min", mins(run.stage1_time));
    Ok(format!(
        "L_rec {head:.3} -> {tail:.3} ({:.0}% drop in {} steps); held-out masked acc {:.3} ({:.0}x chance); {:.1} min",
        drop * 100.0,
        rec.len(),
        run.mim_acc,
        run.mim_acc / chance,
        mins(run.stage1_time)
    ))
}

/// Initial contrastive losses of randomly initialized models, averaged over
/// init seeds and batches, each against the log of its own pair count.
struct InitLoss {
    ehr: f64,
    ehr_ref: f64,
    report: f64,
    report_ref: f64,
    ehr_range: (f64, f64),
}

fn random_init_losses(run: &Run) -> Result<InitLoss, Box<dyn std::error::Error>> {
    let p = &run.profile;
    let dims = MimDims::from_profile(p);
    let samples = pl::alignment_samples(p, &run.cohort, &run.train, &run.texts, &HoldoutTerms::default())?;
    let set = AlignData { dims, specs: &run.specs, caches: &run.caches, samples };
    let mut trainer = AlignTrainer::new(p, &run.stage1, set.samples.len())?;
    let b = p.align.batch;
    need!(set.samples.len() >= b, "{} samples for batch {b}", set.samples.len());
    let (inits, batches) = (6u64, 5);
    let mut out = InitLoss { ehr: 0.0, ehr_ref: (b as f64).ln(), report: 0.0, report_ref: 0.0, ehr_range: (f64::INFINITY, 0.0) };
    for init in 0..inits {
        trainer.model = AlignModel::new(p, dims, &mut rng_from(p.seed ^ (0x5eed + init)));
        let mut ehr = 0.0;
        for r in 0..batches {
            let start = (r * 37) % (set.samples.len() - b + 1);
            let batch: Vec<&align::AlignSample> = set.samples[start..start + b].iter().collect();
            let (w, plans) = trainer.prepare(&set, &batch)?;
            let mut g = G::new();
            let (_, l) = trainer.model.loss(&mut g, &w, &plans, &batch, &mut Ctx::eval())?;
            let present = batch.iter().filter(|s| s.text.is_some()).count();
            ehr += l.ehr.ok_or("batch without EHR")? / batches as f64;
            out.report += l.report.ok_or("batch without reports")?;
            out.report_ref += (present as f64).ln();
        }
        out.ehr += ehr / inits as f64;
        out.ehr_range = (out.ehr_range.0.min(ehr), out.ehr_range.1.max(ehr));
    }
    out.report /= (inits as usize * batches) as f64;
    out.report_ref /= (inits as usize * batches) as f64;
    Ok(out)
}

fn stage2_smoke(run: &Run) -> Check {
    let b = run.profile.align.batch;
    need!(b == 64, "batch {b}");
    let l = random_init_losses(run)?;
    for (name, v, r) in [("EHR", l.ehr, l.ehr_ref), ("report", l.report, l.report_ref)] {
        need!((v / r - 1.0).abs() <= 0.15, "random-init {name} loss {v:.3} vs {r:.3}");
    }
    let chance = 1.0 / 64.0;
    need!(run.profile.align.steps == 500, "{} alignment steps", run.profile.align.steps);
    need!(run.retrieval >= 5.0 * chance, "retrieval top-1 {:.3} vs chance {chance:.4}", run.retrieval);
    need!(mins(run.stage2_time) < 20.0, "stage II took {:.1} min", mins(run.stage2_time));
    let from_stage1 = run.align_init.ehr.unwrap_or(f64::NAN);
    Ok(format!(
        "random-init EHR {:.3} vs ln 64 = {:.3} ({:+.1}%, inits {:.3}..{:.3}), report {:.3} vs ln n = {:.3} ({:+.1}%); \
         stage-I init EHR {from_stage1:.3}; retrieval {:.3} on {} sessions ({:.1}x chance); {:.1} min",
        l.ehr,
        l.ehr_ref,
        (l.ehr / l.ehr_ref - 1.0) * 100.0,
        l.ehr_range.0,
        l.ehr_range.1,
        l.report,
        l.report_ref,
        (l.report / l.report_ref - 1.0) * 100.0,
        run.retrieval,
        run.retrieval_n,
        run.retrieval / chance,
        mins(run.stage2_time)
    ))
}

fn visible(t: &TaskSpec, p: &Profile) -> Option<bool> {
    (t.axis != Axis::Feature).then(|| bench::task_effect_db(t, &p.cohort) >= 3.0)
}

fn end_to_end(run: &Run) -> Check {
    let p = &run.profile;
    let score = |model: &str, task: &str| -> Vec<(usize, f64)> {
        run.results
            .iter()
            .filter(|r| r.model == model && r.task == task)
            .filter_map(|r| r.auroc.map(|a| (r.seed, a)))
            .collect()
    };
    let mut lines = Vec::new();
    let vis: Vec<&TaskSpec> = run.tasks.iter().filter(|t| visible(t, p) == Some(true)).collect();
    let ehr_only: Vec<&TaskSpec> = run.tasks.iter().filter(|t| visible(t, p) == Some(false)).collect();
    need!(!vis.is_empty() && !ehr_only.is_empty(), "task classes are empty");
    for t in &vis {
        let s = score("recon", &t.id);
        need!(s.len() == p.bench.seeds, "{}: {} scored seeds", t.id, s.len());
        let m = s.iter().map(|x| x.1).sum::<f64>() / s.len() as f64;
        need!(m >= 0.80, "recon AUROC {m:.3} on {}", t.id);
        lines.push(format!("{} {m:.3}", t.id));
    }
    let mut wins = 0;
    for seed in 0..p.bench.seeds {
        let mean = |model: &str| -> Result<f64, String> {
            let v: Vec<f64> = ehr_only
                .iter()
                .map(|t| score(model, &t.id).into_iter().find(|x| x.0 == seed).map(|x| x.1).ok_or(format!("{model} {} seed {seed} unscored", t.id)))
                .collect::<Result<_, _>>()?;
            Ok(v.iter().sum::<f64>() / v.len() as f64)
        };
        let (r, a) = (mean("recon")?, mean("align")?);
        wins += (a > r) as usize;
        lines.push(format!("seed {seed} EHR-only {a:.3} vs {r:.3}"));
    }
    need!(p.bench.seeds == 4, "{} seeds", p.bench.seeds);
    need!(wins >= 3, "align beat recon on EHR-only tasks in {wins} of 4 seeds ({})", lines.join("; "));
    need!(mins(run.total_time) < 45.0, "pipeline took {:.1} min", mins(run.total_time));
    Ok(format!("recon on visible tasks: {}; align wins {wins}/4; {:.1} min", lines.join(", "), mins(run.total_time)))
}

fn holdout_harness(run: &Run) -> Check {
    let p = &run.profile;
    let held: Vec<String> = run.tasks.iter().filter(|t| visible(t, p) == Some(false)).map(|t| t.id.clone()).collect();
    let terms = concept_holdout_filter(&run.tasks, &held, &p.cohort)?;
    let open = pl::alignment_samples(p, &run.cohort, &run.train, &run.texts, &HoldoutTerms::default())?;
    let closed = pl::alignment_samples(p, &run.cohort, &run.train, &run.texts, &terms)?;
    let codes = |s: &[align::AlignSample]| -> usize {
        s.iter()
            .map(|x| {
                x.ehr.conditions.iter().filter(|c| terms.conditions.contains(c)).count()
                    + x.ehr.medications.iter().filter(|m| terms.medications.contains(m)).count()
            })
            .sum()
    };
    let (before, after) = (codes(&open), codes(&closed));
    need!(before > 0, "held-out codes never occur");
    need!(after == 0, "{after} of {before} held-out codes survive");
    let phrases = |scrub: bool| -> usize {
        run.texts
            .values()
            .map(|t| {
                let t = if scrub { terms.scrub(t) } else { t.clone() }.to_lowercase();
                terms.phrases.iter().filter(|ph| t.contains(&ph.to_lowercase())).count()
            })
            .sum()
    };
    let (pb, pa) = (phrases(false), phrases(true));
    need!(pb > 0 && pa == 0, "{pa} of {pb} held-out phrases survive");

    let dims = MimDims::from_profile(p);
    let set = AlignData { dims, specs: &run.specs, caches: &run.caches, samples: closed };
    let mut trainer = AlignTrainer::new(p, &run.stage1, set.samples.len())?;
    trainer.train(&set, |_| {})?;
    let model = trainer.ema_model();
    let tasks: Vec<TaskSpec> = run.tasks.iter().filter(|t| held.contains(&t.id)).cloned().collect();
    let tables = pl::task_tables(p, &run.cohort, &tasks, &run.split)?;
    let emb = pl::table_embeddings(p, &model.enc, &model.store, None, &run.specs, &run.caches, &tables)?;
    let rs = bench::benchmark_run("holdout", &tables, &emb, &p.bench)?;
    need!(rs.len() == tasks.len() * p.bench.seeds, "{} results", rs.len());
    for r in &rs {
        need!(r.auroc.is_some_and(f64::is_finite), "{} seed {}: {:?}", r.task, r.seed, r.skipped);
    }
    let mean = rs.iter().filter_map(|r| r.auroc).sum::<f64>() / rs.len() as f64;
    Ok(format!(
        "{before} codes and {pb} phrases removed for {}; {} finite held-out AUROCs (mean {mean:.3})",
        held.join(", "),
        rs.len()
    ))
}

fn pair_auroc(s: &[f64], y: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in (0..s.len()).filter(|&i| y[i]) {
        for j in (0..s.len()).filter(|&j| !y[j]) {
            den += 1.0;
            num += if s[i] > s[j] {
                1.0
            } else if s[i] == s[j] {
                0.5
            } else {
                0.0
            };
        }
    }
    num / den
}

fn benchmark_integrity() -> Check {
    let p = Profile::desk();
    let c = generate_cohort(&p.cohort, p.seed)?;
    let rules = rules_from(&p.bench);
    let ids: Vec<u32> = c.patients.iter().map(|r| r.patient_id).collect();
    let tasks = bench::default_tasks(&p.cohort);
    let mut rows = 0;
    for i in 0..50u64 {
        let mut cfg = p.bench.clone();
        cfg.split_seed = 7000 + i;
        cfg.controls_per_case = 1 + i as usize % 3;
        let split = patient_split(&ids, cfg.split, cfg.split_seed);
        let t = build_table(&tasks[i as usize % tasks.len()], &c, &rules, &split, &cfg);
        audit_table(&t, &c, &split)?;
        rows += t.rows.len();
    }
    let mut rng = rng_from(77);
    for case in 0..500 {
        let n = rng.random_range(2..=50);
        let levels = rng.random_range(2..12);
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64).collect();
        let mut y: Vec<bool> = (0..n).map(|_| rng.random::<bool>()).collect();
        y[0] = true;
        y[1] = false;
        let a = auroc(&s, &y).ok_or("undefined AUROC")?;
        let want = pair_auroc(&s, &y);
        need!((a - want).abs() < 1e-12, "table {case}: {a} vs {want}");
    }
    Ok(format!("50 tables ({rows} rows) pass both audits; 500 tables of 2..50 rows match pair counting"))
}

struct CrossPatient<'a> {
    inner: &'a MockClient,
    corpus: &'a [String],
}

impl LlmClient for CrossPatient<'_> {
    fn summarize(&self, report: &str, _: &str, _: usize) -> clef_core::Result<String> {
        let i = self.corpus.iter().position(|r| r == report).unwrap_or(0);
        Ok(self.corpus[(i + 1) % self.corpus.len()].clone())
    }
    fn answer(&self, t: &str, q: &Question) -> clef_core::Result<String> {
        self.inner.answer(t, q)
    }
    fn judge_similarity(&self, a: &str, b: &str) -> clef_core::Result<f64> {
        self.inner.judge_similarity(a, b)
    }
}

struct Table;

impl LlmClient for Table {
    fn summarize(&self, report: &str, _: &str, _: usize) -> clef_core::Result<String> {
        Ok(format!("summary of {report}"))
    }
    fn answer(&self, t: &str, q: &Question) -> clef_core::Result<String> {
        Ok(if t == "summary of r1" && q.text == "q2" { "no" } else { "yes" }.into())
    }
    fn judge_similarity(&self, _: &str, _: &str) -> clef_core::Result<f64> {
        Ok(1.0)
    }
}

struct Recorder<'a> {
    inner: &'a MockClient,
    seen: RefCell<Vec<String>>,
}

impl LlmClient for Recorder<'_> {
    fn summarize(&self, report: &str, prompt: &str, n: usize) -> clef_core::Result<String> {
        self.seen.borrow_mut().push(format!("{report}|{prompt}|{n}"));
        self.inner.summarize(report, prompt, n)
    }
    fn answer(&self, t: &str, q: &Question) -> clef_core::Result<String> {
        self.inner.answer(t, q)
    }
    fn judge_similarity(&self, a: &str, b: &str) -> clef_core::Result<f64> {
        self.inner.judge_similarity(a, b)
    }
}

fn qa_checks() -> Check {
    let p = Profile::desk();
    let c = generate_cohort(&p.cohort, p.seed)?;
    let reports: Vec<String> = c.sessions.iter().filter_map(|s| s.report.clone()).take(60).collect();
    let mock = MockClient::new(&p.cohort);
    let qs = default_questions();
    let identity = Candidate { prompt: "verbatim".into(), length: 100_000 };
    let id = qa_consistency(&reports, &qs, &identity, &mock, 0)?.score;
    need!(id == 1.0, "identity summarizer S = {id}");
    let cross = qa_consistency(&reports, &qs, &identity, &CrossPatient { inner: &mock, corpus: &reports }, 0)?.score;
    need!(cross < id, "cross-patient S = {cross}");
    let two = [Question::new("q1", QuestionKind::Boolean), Question::new("q2", QuestionKind::Boolean)];
    let hand = qa_consistency(&["r0".into(), "r1".into()], &two, &identity, &Table, 0)?.score;
    need!(hand == 0.75, "hand case S = {hand}");
    let canary = "CANARY-7f3a: is the zebra purple?";
    let mut with_canary = qs.clone();
    with_canary.push(Question::new(canary, QuestionKind::Boolean));
    let cand = Candidate { prompt: "findings-first".into(), length: 64 };
    let a = Recorder { inner: &mock, seen: RefCell::default() };
    let sa = qa_consistency(&reports[..10], &with_canary, &cand, &a, 0)?;
    let b = Recorder { inner: &mock, seen: RefCell::default() };
    let sb = qa_consistency(&reports[..10], &qs, &cand, &b, 0)?;
    need!(a.seen.borrow().iter().all(|s| !s.contains("CANARY")), "canary reached the summarizer");
    need!(*a.seen.borrow() == *b.seen.borrow(), "summaries depend on the question set");
    need!(sa.per_question[..qs.len()] == sb.per_question[..], "scores depend on the question set");
    Ok(format!("identity 1.0, cross-patient {cross:.3}, hand case 0.75, canary blind"))
}

fn main() {
    let started = Instant::now();
    let mut failed = 0;
    let mut report = |name: &str, f: &mut dyn FnMut() -> Check| {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()).into())
        });
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail} [{:.1}s]", t.elapsed().as_secs_f64()),
            Err(e) => {
                failed += 1;
                println!("FAIL  {name}: {e} [{:.1}s]", t.elapsed().as_secs_f64());
            }
        }
    };
    report("gradient suite", &mut gradient_suite);
    report("dsp suite", &mut dsp_suite);
    report("loss identities", &mut loss_identities);
    report("vq oracle", &mut vq_oracle);
    report("mask statistics", &mut mask_statistics);
    report("benchmark integrity", &mut benchmark_integrity);
    report("qa consistency", &mut qa_checks);
    let run = match catch_unwind(run_pipeline) {
        Ok(Ok(run)) => Some(run),
        Ok(Err(e)) => {
            println!("desk pipeline failed: {e}");
            None
        }
        Err(_) => {
            println!("desk pipeline panicked");
            None
        }
    };
    let staged: [(&str, fn(&Run) -> Check); 4] = [
        ("stage-I smoke", stage1_smoke),
        ("stage-II smoke", stage2_smoke),
        ("end-to-end ordering", end_to_end),
        ("holdout harness", holdout_harness),
    ];
    for (name, f) in staged {
        match &run {
            Some(run) => report(name, &mut || f(run)),
            None => report(name, &mut || Err("desk pipeline did not complete".into())),
        }
    }
    println!("{} criteria, {failed} failed, {:.1} min", 11, mins(started.elapsed()));
    if failed > 0 {
        std::process::exit(1);
    }
}
