//! Stage II: aligns pooled EEG embeddings with report text and structured
//! EHR through two projection heads and symmetric contrastive losses.

use std::collections::BTreeSet;

use clef_grad::{Adam, AdamConfig, Checkpoint, CheckpointMeta, CosineSchedule, Ema, ParamId, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::bench::{task_phenotypes, TaskRule, TaskSpec};
use crate::cohortgen::{Cohort, LabelRules, PatientRecord, SessionMeta};
use crate::dsp::Spectrogram;
use crate::error::{data, CoreError, Result};
use crate::manifest::checkpoint_hash;
use crate::mim::{checkpoint_dims, sample_drop_plan, MaskPlan, MimDims, MimEncoder, MimWindow};
use crate::nn::{embedding_table, Ctx, Linear, Store, Transformer, G};
use crate::profile::{AlignConfig, CohortConfig, Profile};
use crate::rng::{derive, rng_from, stage_rng, StageRng};
use crate::vqtok::{MaskSchedule, TokenCache};

/// Frozen text features: `len` rows of `dim` values.
#[derive(Clone, Debug, PartialEq)]
pub struct TextFeatures {
    pub len: usize,
    pub dim: usize,
    pub values: Vec<f32>,
}

pub trait TextEmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;
    fn max_len(&self) -> usize;
    fn embed(&self, text: &str) -> TextFeatures;
}

/// Words as lowercase alphanumeric runs.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

/// One feature row per word: signed hashing of the word's character n-grams
/// (with boundary marks) into `dim` buckets, then unit-normalized.
#[derive(Clone, Debug)]
pub struct HashedNgramProvider {
    pub dim: usize,
    pub max_len: usize,
    pub n: usize,
    pub seed: u64,
}

impl HashedNgramProvider {
    pub fn from_config(cfg: &AlignConfig) -> Self {
        Self {
            dim: cfg.text_dim,
            max_len: cfg.text_max_len,
            n: cfg.text_ngram.max(1),
            seed: cfg.text_seed,
        }
    }

    fn word_row(&self, word: &str, row: &mut [f32]) {
        let chars: Vec<char> = format!("<{word}>").chars().collect();
        let n = self.n.min(chars.len());
        for g in chars.windows(n) {
            let gram: String = g.iter().collect();
            let h = derive(self.seed, &gram);
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            row[(h % self.dim as u64) as usize] += sign;
        }
        let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
}

impl TextEmbeddingProvider for HashedNgramProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn embed(&self, text: &str) -> TextFeatures {
        let ws = words(text);
        let len = ws.len().min(self.max_len).max(1);
        let mut values = vec![0f32; len * self.dim];
        for (i, w) in ws.iter().take(len).enumerate() {
            self.word_row(w, &mut values[i * self.dim..(i + 1) * self.dim]);
        }
        TextFeatures { len, dim: self.dim, values }
    }
}

/// Structured EHR for one session; code lists are sorted, deduplicated when
/// configured, and truncated to the slot budget keeping the lowest ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EhrInput {
    pub age_bin: usize,
    pub sex: usize,
    pub race: usize,
    pub conditions: Vec<usize>,
    pub medications: Vec<usize>,
}

impl EhrInput {
    pub fn assemble(age_bin: usize, sex: usize, race: usize, mut conditions: Vec<usize>, mut medications: Vec<usize>, cfg: &AlignConfig) -> Result<Self> {
        if age_bin >= cfg.age_bins || sex >= cfg.sex_categories || race >= cfg.race_categories {
            return data(format!("demographics ({age_bin}, {sex}, {race}) outside the vocabularies"));
        }
        if let Some(c) = conditions.iter().find(|&&c| c >= cfg.n_conditions) {
            return data(format!("condition id {c} outside vocabulary of {}", cfg.n_conditions));
        }
        if let Some(m) = medications.iter().find(|&&m| m >= cfg.n_medications) {
            return data(format!("medication id {m} outside vocabulary of {}", cfg.n_medications));
        }
        for (v, cap) in [(&mut conditions, cfg.condition_slots), (&mut medications, cfg.medication_slots)] {
            v.sort_unstable();
            if cfg.dedup_codes {
                v.dedup();
            }
            v.truncate(cap);
        }
        Ok(Self {
            age_bin,
            sex,
            race,
            conditions,
            medications,
        })
    }

    /// Codes active at the session day under the shared label rules.
    pub fn for_session(record: &PatientRecord, session: &SessionMeta, cohort: &CohortConfig, rules: &LabelRules, cfg: &AlignConfig) -> Result<Self> {
        Self::assemble(
            record.age_bin(),
            record.sex.index(),
            record.race,
            rules.active_diagnoses(record, &cohort.diagnoses, session.day),
            rules.active_medications(record, session.day),
            cfg,
        )
    }
}

/// Codes and phrases hidden from alignment for held-out tasks.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HoldoutTerms {
    pub conditions: BTreeSet<usize>,
    pub medications: BTreeSet<usize>,
    pub phrases: Vec<String>,
}

impl HoldoutTerms {
    pub fn is_empty(&self) -> bool {
        self.conditions.is_empty() && self.medications.is_empty() && self.phrases.is_empty()
    }

    pub fn filter_ehr(&self, mut e: EhrInput) -> EhrInput {
        e.conditions.retain(|c| !self.conditions.contains(c));
        e.medications.retain(|m| !self.medications.contains(m));
        e
    }

    /// Removes every case-insensitive occurrence of each phrase.
    pub fn scrub(&self, text: &str) -> String {
        let mut out = text.to_string();
        loop {
            let lower = out.to_lowercase();
            let hit = self
                .phrases
                .iter()
                .filter_map(|p| lower.find(&p.to_lowercase()).map(|i| (i, p.len())))
                .min();
            match hit {
                // lowercasing keeps byte offsets for the ASCII text we produce
                Some((i, n)) if lower.len() == out.len() => out.replace_range(i..i + n, ""),
                Some(_) => {
                    out = lower;
                }
                None => return out,
            }
        }
    }
}

/// Terms for the held-out task ids: each task's own code or phrase plus the
/// codes, phrases and medication names of the phenotypes behind it.
pub fn concept_holdout_filter(tasks: &[TaskSpec], holdout: &[String], cfg: &CohortConfig) -> Result<HoldoutTerms> {
    let mut terms = HoldoutTerms::default();
    let mut phrases = BTreeSet::new();
    let dx = |n: &str| cfg.diagnoses.iter().position(|d| d.name == n);
    let med = |n: &str| cfg.medications.iter().position(|m| m == n);
    for id in holdout {
        let task = tasks
            .iter()
            .find(|t| &t.id == id)
            .ok_or_else(|| CoreError::Config(format!("holdout task {id:?} is not defined")))?;
        match &task.rule {
            TaskRule::Diagnosis(n) => {
                terms.conditions.extend(dx(n));
                phrases.insert(n.replace('_', " "));
            }
            TaskRule::Medication(n) => {
                terms.medications.extend(med(n));
                phrases.insert(n.replace('_', " "));
            }
            TaskRule::ReportFeature(p) => {
                phrases.insert(p.clone());
            }
        }
        for pi in task_phenotypes(task, cfg) {
            let p = &cfg.phenotypes[pi];
            terms.conditions.extend(p.diagnoses.iter().filter_map(|n| dx(n)));
            terms.medications.extend(p.medications.iter().filter_map(|n| med(n)));
            phrases.extend(p.medications.iter().map(|n| n.replace('_', " ")));
            phrases.extend(p.report_phrases.iter().cloned());
        }
    }
    terms.phrases = phrases.into_iter().collect();
    Ok(terms)
}

/// Projected provider features, learned positions, a self-attention refiner
/// and mean pooling.
#[derive(Clone, Debug)]
pub struct ReportEncoder {
    proj: Linear,
    pos: ParamId,
    body: Transformer,
    dim: usize,
    max_len: usize,
}

impl ReportEncoder {
    pub fn new(store: &mut Store, cfg: &AlignConfig, rng: &mut StageRng) -> Self {
        let d = cfg.proj_dim;
        Self {
            proj: Linear::new(store, "rep.proj", cfg.text_dim, d, true, rng),
            pos: embedding_table(store, "rep.pos", cfg.text_max_len, d, 0.02, rng),
            body: Transformer::new(store, "rep.body", d, cfg.refiner_depth, cfg.refiner_heads, 4, 0.0, rng),
            dim: d,
            max_len: cfg.text_max_len,
        }
    }

    pub fn forward(&self, g: &mut G, store: &Store, texts: &[&TextFeatures], ctx: &mut Ctx) -> Result<Var> {
        let n = texts.len();
        let len = texts.iter().map(|t| t.len).max().unwrap_or(1).min(self.max_len);
        let td = texts.first().map_or(0, |t| t.dim);
        let mut x = vec![0f32; n * len * td];
        let mut mask = vec![false; n * len];
        for (i, t) in texts.iter().enumerate() {
            if t.dim != td {
                return data(format!("text feature width {} differs from {td}", t.dim));
            }
            let l = t.len.min(len);
            x[i * len * td..(i * len + l) * td].copy_from_slice(&t.values[..l * td]);
            mask[i * len..i * len + l].fill(true);
        }
        let xv = g.constant(Tensor::new(&[n * len, td], x)?);
        let h = self.proj.forward(g, store, xv)?;
        let h = g.reshape(h, &[n, len, self.dim])?;
        let pos = g.param(store, self.pos);
        let pos = g.index_select(pos, &(0..len).collect::<Vec<_>>())?;
        let h = g.add(h, pos)?;
        let h = self.body.forward(g, store, h, Some(&mask), ctx)?;
        Ok(g.mean_pool_masked(h, &mask)?)
    }
}

/// Demographic, condition and medication lookups assembled into one slot
/// sequence, plus a per-kind embedding shared by all slots of a kind, then
/// self-attention and masked mean pooling.
const SLOT_KINDS: usize = 5;

#[derive(Clone, Debug)]
pub struct EhrEncoder {
    age: ParamId,
    sex: ParamId,
    race: ParamId,
    dx: ParamId,
    med: ParamId,
    kind: ParamId,
    body: Transformer,
    dim: usize,
    dx_slots: usize,
    med_slots: usize,
}

impl EhrEncoder {
    pub fn new(store: &mut Store, cfg: &AlignConfig, rng: &mut StageRng) -> Self {
        let d = cfg.proj_dim;
        let std = 1.0 / (d as f64).sqrt();
        Self {
            age: embedding_table(store, "ehr.age", cfg.age_bins, d, std, rng),
            sex: embedding_table(store, "ehr.sex", cfg.sex_categories, d, std, rng),
            race: embedding_table(store, "ehr.race", cfg.race_categories, d, std, rng),
            dx: embedding_table(store, "ehr.dx", cfg.n_conditions, d, std, rng),
            med: embedding_table(store, "ehr.med", cfg.n_medications, d, std, rng),
            kind: embedding_table(store, "ehr.kind", SLOT_KINDS, d, std, rng),
            body: Transformer::new(store, "ehr.body", d, cfg.ehr_depth, cfg.ehr_heads, 4, 0.0, rng),
            dim: d,
            dx_slots: cfg.condition_slots,
            med_slots: cfg.medication_slots,
        }
    }

    pub fn slots(&self) -> usize {
        3 + self.dx_slots + self.med_slots
    }

    pub fn forward(&self, g: &mut G, store: &Store, inputs: &[&EhrInput], ctx: &mut Ctx) -> Result<Var> {
        let n = inputs.len();
        let (cs, ms, s) = (self.dx_slots, self.med_slots, self.slots());
        let mut dx_ids = vec![0usize; n * cs];
        let mut med_ids = vec![0usize; n * ms];
        let mut mask = vec![false; n * s];
        for (i, e) in inputs.iter().enumerate() {
            if e.conditions.len() > cs || e.medications.len() > ms {
                return data("EHR input exceeds the slot budget");
            }
            mask[i * s..i * s + 3].fill(true);
            for (j, &c) in e.conditions.iter().enumerate() {
                dx_ids[i * cs + j] = c;
                mask[i * s + 3 + j] = true;
            }
            for (j, &m) in e.medications.iter().enumerate() {
                med_ids[i * ms + j] = m;
                mask[i * s + 3 + cs + j] = true;
            }
        }
        let look = |g: &mut G, table: ParamId, ids: &[usize]| -> Result<Var> {
            let t = g.param(store, table);
            Ok(g.index_select(t, ids)?)
        };
        let age = look(g, self.age, &inputs.iter().map(|e| e.age_bin).collect::<Vec<_>>())?;
        let sex = look(g, self.sex, &inputs.iter().map(|e| e.sex).collect::<Vec<_>>())?;
        let race = look(g, self.race, &inputs.iter().map(|e| e.race).collect::<Vec<_>>())?;
        let dx = look(g, self.dx, &dx_ids)?;
        let med = look(g, self.med, &med_ids)?;
        let stacked = g.concat(&[age, sex, race, dx, med], 0)?;
        // blockwise rows -> per-patient slot order
        let mut order = Vec::with_capacity(n * s);
        for i in 0..n {
            order.extend([i, n + i, 2 * n + i]);
            order.extend((0..cs).map(|j| 3 * n + i * cs + j));
            order.extend((0..ms).map(|j| 3 * n + n * cs + i * ms + j));
        }
        let x = g.index_select(stacked, &order)?;
        // slot kind: age, sex, race, condition, medication
        let one: Vec<usize> = [0, 1, 2].into_iter().chain(std::iter::repeat_n(3, cs)).chain(std::iter::repeat_n(4, ms)).collect();
        let kinds = look(g, self.kind, &one.repeat(n))?;
        let x = g.add(x, kinds)?;
        let x = g.reshape(x, &[n, s, self.dim])?;
        let h = self.body.forward(g, store, x, Some(&mask), ctx)?;
        Ok(g.mean_pool_masked(h, &mask)?)
    }
}

/// Symmetric InfoNCE over L2-normalized rows: the mean of the a→b and b→a
/// cross-entropies with matching rows as targets.
pub fn clip_loss_rows(g: &mut G, a: Var, b: Var, tau: f64) -> Result<Var> {
    let n = g.shape(a)[0];
    let an = g.l2_normalize(a, 1e-12);
    let bn = g.l2_normalize(b, 1e-12);
    let ab = g.matmul_t(an, bn)?;
    let ab = g.scale(ab, 1.0 / tau);
    let ba = g.matmul_t(bn, an)?;
    let ba = g.scale(ba, 1.0 / tau);
    let targets: Vec<usize> = (0..n).collect();
    let l1 = g.cross_entropy(ab, &targets, 0.0)?;
    let l2 = g.cross_entropy(ba, &targets, 0.0)?;
    let s = g.add(l1, l2)?;
    Ok(g.scale(s, 0.5))
}

/// Contrastive loss restricted to present rows. An all-absent batch yields a
/// zero constant and `false`.
pub fn clip_loss(g: &mut G, a: Var, b: Var, tau: f64, presence: &[bool]) -> Result<(Var, bool)> {
    let rows: Vec<usize> = (0..presence.len()).filter(|&i| presence[i]).collect();
    if rows.is_empty() {
        return Ok((g.constant(Tensor::scalar(0.0)), false));
    }
    if rows.len() == presence.len() {
        return Ok((clip_loss_rows(g, a, b, tau)?, true));
    }
    let a = g.index_select(a, &rows)?;
    let b = g.index_select(b, &rows)?;
    Ok((clip_loss_rows(g, a, b, tau)?, true))
}

/// Everything Stage II needs about one session.
#[derive(Clone, Debug)]
pub struct AlignSample {
    /// Index into the spectrogram and token cache slices.
    pub index: usize,
    pub text: Option<TextFeatures>,
    pub ehr: EhrInput,
}

/// Builds samples for `sessions`, scrubbing held-out phrases from reports
/// and codes from EHR. `texts` maps a session to its (summarized) report.
pub fn build_samples(
    cohort: &Cohort,
    sessions: &[u32],
    texts: &dyn Fn(&SessionMeta) -> Option<String>,
    provider: &dyn TextEmbeddingProvider,
    holdout: &HoldoutTerms,
    rules: &LabelRules,
    cfg: &AlignConfig,
) -> Result<Vec<AlignSample>> {
    sessions
        .iter()
        .enumerate()
        .map(|(index, &sid)| {
            let s = &cohort.sessions[sid as usize];
            let record = cohort.patient(s.patient_id);
            let ehr = holdout.filter_ehr(EhrInput::for_session(record, s, &cohort.config, rules, cfg)?);
            let text = texts(s).map(|t| provider.embed(&holdout.scrub(&t)));
            Ok(AlignSample { index, text, ehr })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct AlignModel {
    pub cfg: AlignConfig,
    pub store: Store,
    pub enc: MimEncoder,
    pub rep: ReportEncoder,
    pub ehr: EhrEncoder,
    pub head_rep: Linear,
    pub head_ehr: Linear,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AlignLosses {
    pub report: Option<f64>,
    pub ehr: Option<f64>,
    pub total: f64,
}

impl AlignModel {
    pub fn new(profile: &Profile, dims: MimDims, rng: &mut StageRng) -> Self {
        let mut store = Store::new();
        let enc = MimEncoder::new(&mut store, dims, &profile.mim, rng);
        let cfg = profile.align.clone();
        let rep = ReportEncoder::new(&mut store, &cfg, rng);
        let ehr = EhrEncoder::new(&mut store, &cfg, rng);
        let head_rep = Linear::new(&mut store, "head.rep", profile.mim.dim, cfg.proj_dim, true, rng);
        let head_ehr = Linear::new(&mut store, "head.ehr", profile.mim.dim, cfg.proj_dim, true, rng);
        Self {
            cfg,
            store,
            enc,
            rep,
            ehr,
            head_rep,
            head_ehr,
        }
    }

    /// Copies the Stage I inference weights into the encoder. Every encoder
    /// parameter must be covered.
    pub fn init_from_stage1(&mut self, ck: &Checkpoint) -> Result<()> {
        if ck.meta.stage != "mim" {
            return data(format!("Stage II must start from a Stage I checkpoint, got stage {:?}", ck.meta.stage));
        }
        let dims = checkpoint_dims(ck)?;
        if dims != self.enc.dims {
            return data(format!("Stage I dimensions {dims:?} differ from {:?}", self.enc.dims));
        }
        let table = if ck.table(clef_grad::TABLE_EMA).is_some() { clef_grad::TABLE_EMA } else { clef_grad::TABLE_PARAMS };
        let loaded = ck.load_into(table, &mut self.store, true)?;
        let need = self.store.ids_with_prefix("enc.").len();
        let got = loaded.iter().filter(|n| n.starts_with("enc.")).count();
        if got != need {
            return data(format!("Stage I checkpoint covers {got} of {need} encoder parameters"));
        }
        Ok(())
    }

    /// Loss on one batch given prepared windows and drop plans.
    pub fn loss(&self, g: &mut G, windows: &[MimWindow], plans: &[MaskPlan], samples: &[&AlignSample], ctx: &mut Ctx) -> Result<(Var, AlignLosses)> {
        let out = self.enc.forward(g, &self.store, windows, plans, ctx)?;
        let u = self.enc.pool(g, &out)?;
        let mut total: Option<Var> = None;
        let mut losses = AlignLosses::default();
        if self.cfg.use_ehr {
            let z = self.head_ehr.forward(g, &self.store, u)?;
            let inputs: Vec<&EhrInput> = samples.iter().map(|s| &s.ehr).collect();
            let v = self.ehr.forward(g, &self.store, &inputs, ctx)?;
            let (l, _) = clip_loss(g, z, v, self.cfg.tau, &vec![true; samples.len()])?;
            losses.ehr = Some(g.scalar(l));
            total = Some(l);
        }
        if self.cfg.use_report {
            let present: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].text.is_some()).collect();
            if !present.is_empty() {
                let z = self.head_rep.forward(g, &self.store, u)?;
                let z = g.index_select(z, &present)?;
                let texts: Vec<&TextFeatures> = present.iter().filter_map(|&i| samples[i].text.as_ref()).collect();
                let v = self.rep.forward(g, &self.store, &texts, ctx)?;
                let l = clip_loss_rows(g, z, v, self.cfg.tau)?;
                losses.report = Some(g.scalar(l));
                total = Some(match total {
                    Some(t) => g.add(t, l)?,
                    None => l,
                });
            }
        }
        let total = match total {
            Some(t) => t,
            None => return data("both alignment losses are disabled or empty"),
        };
        losses.total = g.scalar(total);
        Ok((total, losses))
    }

    /// EHR-head projections of pooled embeddings.
    pub fn project_ehr(&self, u: &[Vec<f32>]) -> Result<Vec<Vec<f32>>> {
        self.project(&self.head_ehr, u)
    }

    pub fn project_report(&self, u: &[Vec<f32>]) -> Result<Vec<Vec<f32>>> {
        self.project(&self.head_rep, u)
    }

    fn project(&self, head: &Linear, u: &[Vec<f32>]) -> Result<Vec<Vec<f32>>> {
        if u.is_empty() {
            return Ok(Vec::new());
        }
        let d = u[0].len();
        let mut g = G::new();
        let x = g.constant(Tensor::new(&[u.len(), d], u.concat())?);
        let y = head.forward(&mut g, &self.store, x)?;
        Ok(g.value(y).data().chunks(self.cfg.proj_dim).map(|r| r.to_vec()).collect())
    }

    pub fn embed_ehr(&self, inputs: &[&EhrInput]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(64) {
            let mut g = G::new();
            let v = self.ehr.forward(&mut g, &self.store, chunk, &mut Ctx::eval())?;
            out.extend(g.value(v).data().chunks(self.cfg.proj_dim).map(|r| r.to_vec()));
        }
        Ok(out)
    }

    pub fn embed_reports(&self, texts: &[&TextFeatures]) -> Result<Vec<Vec<f32>>> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(64) {
            let mut g = G::new();
            let v = self.rep.forward(&mut g, &self.store, chunk, &mut Ctx::eval())?;
            out.extend(g.value(v).data().chunks(self.cfg.proj_dim).map(|r| r.to_vec()));
        }
        Ok(out)
    }

    pub fn with_store(&self, store: Store) -> Self {
        Self {
            store,
            ..self.clone()
        }
    }
}

/// Session windows paired with Stage II samples.
pub struct AlignData<'a> {
    pub dims: MimDims,
    pub specs: &'a [Spectrogram],
    pub caches: &'a [TokenCache],
    pub samples: Vec<AlignSample>,
}

impl AlignData<'_> {
    fn window(&self, s: &AlignSample, rng: &mut StageRng) -> Result<MimWindow> {
        let cache = &self.caches[s.index];
        let w = rng.random_range(0..MimWindow::count(cache, &self.dims));
        MimWindow::from_session(cache, &self.specs[s.index], &self.dims, w)
    }
}

pub struct AlignTrainer {
    pub model: AlignModel,
    pub ema: Ema<f32>,
    pub opt: Adam<f32>,
    pub schedule: CosineSchedule,
    pub mask: Option<MaskSchedule>,
    pub step: u64,
    pub init_from: Option<String>,
    rng: StageRng,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AlignLog {
    pub step: u64,
    pub losses: AlignLosses,
    pub lr: f64,
}

impl AlignLog {
    pub const HEADER: &'static str = "step\tloss_report\tloss_ehr\ttotal\tlr";

    pub fn row(&self) -> String {
        let f = |v: Option<f64>| v.map_or("NA".to_string(), |v| format!("{v:.6}"));
        format!("{}\t{}\t{}\t{:.6}\t{:.3e}", self.step, f(self.losses.report), f(self.losses.ehr), self.losses.total, self.lr)
    }
}

pub fn total_steps(cfg: &AlignConfig, n: usize) -> (u64, u64) {
    let per_epoch = n.div_ceil(cfg.batch.max(1)).max(1) as u64;
    let steps = if cfg.steps > 0 { cfg.steps } else { cfg.epochs as u64 * per_epoch };
    (steps, (cfg.warmup_epochs as u64 * per_epoch).min(steps / 2))
}

impl AlignTrainer {
    /// Stage II trainer initialized from a Stage I checkpoint.
    pub fn new(profile: &Profile, stage1: &Checkpoint, n_samples: usize) -> Result<Self> {
        let dims = checkpoint_dims(stage1)?;
        let mut model = AlignModel::new(profile, dims, &mut stage_rng(profile.seed, "align.init"));
        model.init_from_stage1(stage1)?;
        let cfg = &profile.align;
        let (steps, warmup) = total_steps(cfg, n_samples);
        let mask = if cfg.channel_masking { Some(MaskSchedule::from_profile(profile)?) } else { None };
        Ok(Self {
            ema: Ema::new(&model.store, cfg.ema_decay),
            opt: Adam::new(&model.store, AdamConfig::adamw(cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay)),
            schedule: CosineSchedule {
                base_lr: cfg.lr,
                min_lr: cfg.lr * 0.1,
                warmup_steps: warmup,
                total_steps: steps,
            },
            mask,
            model,
            step: 0,
            init_from: Some(checkpoint_hash(stage1)),
            rng: stage_rng(profile.seed, "align.train"),
        })
    }

    /// Windows with token drop and (fully ramped) channel masking applied.
    pub fn prepare(&mut self, set: &AlignData, batch: &[&AlignSample]) -> Result<(Vec<MimWindow>, Vec<MaskPlan>)> {
        let mut windows = Vec::with_capacity(batch.len());
        let mut plans = Vec::with_capacity(batch.len());
        for s in batch {
            let mut w = set.window(s, &mut self.rng)?;
            if let Some(m) = &self.mask {
                let avail = &set.specs[s.index].channel_available;
                let draw = m.sample(m.ramp_steps, avail, &mut self.rng);
                w.mask_channels(&draw.keep);
            }
            plans.push(sample_drop_plan(&w.valid, self.model.cfg.r_drop, &mut self.rng));
            windows.push(w);
        }
        Ok((windows, plans))
    }

    pub fn train_step(&mut self, set: &AlignData, batch: &[&AlignSample]) -> Result<AlignLog> {
        let (windows, plans) = self.prepare(set, batch)?;
        let mut g = G::new();
        let mut drop_rng = rng_from(self.rng.random());
        let (loss, losses) = self.model.loss(&mut g, &windows, &plans, batch, &mut Ctx::train(&mut drop_rng))?;
        if !losses.total.is_finite() {
            return Err(CoreError::Numeric(format!("alignment loss at step {}", self.step)));
        }
        let mut grads = g.backward(loss)?.param_grads(&self.model.store);
        if self.model.cfg.grad_clip > 0.0 {
            clef_grad::clip_grad_norm(&mut grads, self.model.cfg.grad_clip);
        }
        let lr = self.schedule.lr(self.step);
        self.opt.step_lr(&mut self.model.store, &grads, lr)?;
        self.ema.update(&self.model.store);
        self.step += 1;
        Ok(AlignLog {
            step: self.step - 1,
            losses,
            lr,
        })
    }

    /// Shuffled epochs of full batches over `data`.
    pub fn train(&mut self, set: &AlignData, mut progress: impl FnMut(&AlignLog)) -> Result<Vec<AlignLog>> {
        let n = set.samples.len();
        if n == 0 {
            return data("no alignment samples");
        }
        let b = self.model.cfg.batch.min(n);
        let mut order: Vec<usize> = (0..n).collect();
        let mut cursor = n;
        let mut log = Vec::new();
        while self.step < self.schedule.total_steps {
            if cursor + b > n {
                order.shuffle(&mut self.rng);
                cursor = 0;
            }
            let batch: Vec<&AlignSample> = order[cursor..cursor + b].iter().map(|&i| &set.samples[i]).collect();
            cursor += b;
            let l = self.train_step(set, &batch)?;
            progress(&l);
            log.push(l);
        }
        Ok(log)
    }

    pub fn ema_model(&self) -> AlignModel {
        self.model.with_store(self.ema.to_store(&self.model.store))
    }

    pub fn checkpoint(&self, profile_hash: &str) -> Checkpoint {
        let meta = CheckpointMeta {
            stage: "align".into(),
            profile_hash: profile_hash.into(),
            init_from: self.init_from.clone(),
            init_stage: Some("mim".into()),
            notes: [("dims".to_string(), serde_json::to_string(&self.model.enc.dims).expect("dims serialize"))].into(),
            ..Default::default()
        };
        Checkpoint::capture(&self.model.store, Some(&self.ema), Some(&self.opt), meta)
    }
}

/// Sequential-training audit: an alignment checkpoint must name the Stage I
/// checkpoint it started from.
pub fn verify_provenance(align: &Checkpoint, stage1: &Checkpoint) -> Result<()> {
    if align.meta.stage != "align" {
        return data(format!("expected an alignment checkpoint, found {:?}", align.meta.stage));
    }
    match (&align.meta.init_from, align.meta.init_stage.as_deref()) {
        (Some(h), Some("mim")) if *h == checkpoint_hash(stage1) => Ok(()),
        (Some(_), Some("mim")) => data("alignment checkpoint was initialized from a different Stage I checkpoint"),
        _ => data("alignment checkpoint lacks Stage I provenance"),
    }
}

/// Encoder of a Stage I or Stage II checkpoint, in its own store.
pub fn load_encoder(profile: &Profile, ck: &Checkpoint) -> Result<(MimEncoder, Store)> {
    let dims = checkpoint_dims(ck)?;
    let mut store = Store::new();
    let enc = MimEncoder::new(&mut store, dims, &profile.mim, &mut rng_from(0));
    let loaded = ck.load_into(weights_table(ck), &mut store, true)?;
    if loaded.len() != store.len() {
        return data(format!("checkpoint covers {} of {} encoder parameters", loaded.len(), store.len()));
    }
    Ok((enc, store))
}

fn weights_table(ck: &Checkpoint) -> &'static str {
    if ck.table(clef_grad::TABLE_EMA).is_some() {
        clef_grad::TABLE_EMA
    } else {
        clef_grad::TABLE_PARAMS
    }
}

/// Rebuilds a full Stage II model from its checkpoint.
pub fn load_align(profile: &Profile, ck: &Checkpoint) -> Result<AlignModel> {
    if ck.meta.stage != "align" {
        return data(format!("expected an alignment checkpoint, found {:?}", ck.meta.stage));
    }
    let mut m = AlignModel::new(profile, checkpoint_dims(ck)?, &mut rng_from(0));
    let loaded = ck.load_into(weights_table(ck), &mut m.store, false)?;
    if loaded.len() != m.store.len() {
        return data(format!("alignment checkpoint covers {} of {} parameters", loaded.len(), m.store.len()));
    }
    Ok(m)
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

/// Top-1 retrieval accuracy of queries against candidates over random pools
/// of `pool` matched pairs.
pub fn retrieval_top1(queries: &[Vec<f32>], candidates: &[Vec<f32>], pool: usize, trials: usize, seed: u64) -> f64 {
    let n = queries.len().min(candidates.len());
    let pool = pool.min(n);
    if pool == 0 {
        return 0.0;
    }
    let mut rng = rng_from(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    let (mut hits, mut total) = (0usize, 0usize);
    for _ in 0..trials.max(1) {
        idx.shuffle(&mut rng);
        let p = &idx[..pool];
        for &q in p {
            let best = p
                .iter()
                .map(|&c| (c, cosine(&queries[q], &candidates[c])))
                .fold((usize::MAX, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a })
                .0;
            hits += (best == q) as usize;
            total += 1;
        }
    }
    hits as f64 / total as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn provider_is_deterministic_and_bounded() {
        let p = HashedNgramProvider {
            dim: 32,
            max_len: 4,
            n: 3,
            seed: 1,
        };
        let a = p.embed("Generalized slowing is seen over both hemispheres");
        assert_eq!(a, p.embed("Generalized slowing is seen over both hemispheres"));
        assert_eq!(a.len, 4);
        assert_eq!(p.embed("").len, 1);
    }

    #[test]
    fn scrub_removes_all_case_variants() {
        let t = HoldoutTerms {
            phrases: vec!["hypertension".into()],
            ..Default::default()
        };
        let s = t.scrub("History of Hypertension and hypertension; HYPERTENSION.");
        assert!(!s.to_lowercase().contains("hypertension"));
        let nested = t.scrub("hyperhypertensiontension");
        assert!(!nested.contains("hypertension"));
    }

    #[test]
    fn assemble_sorts_dedups_truncates() {
        let mut cfg = Profile::desk().align;
        cfg.condition_slots = 3;
        let e = EhrInput::assemble(1, 0, 2, vec![9, 4, 4, 7, 1], vec![3, 2], &cfg).unwrap();
        assert_eq!(e.conditions, vec![1, 4, 7]);
        assert_eq!(e.medications, vec![2, 3]);
        cfg.dedup_codes = false;
        let e = EhrInput::assemble(1, 0, 2, vec![4, 4, 1], vec![], &cfg).unwrap();
        assert_eq!(e.conditions, vec![1, 4, 4]);
        assert!(EhrInput::assemble(11, 0, 0, vec![], vec![], &Profile::desk().align).is_err());
    }
}
