//! Patient-level probing benchmark: task definitions, label extraction,
//! patient splits, matched case-control tables, session embeddings, probe
//! training and metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use clef_grad::{Adam, AdamConfig, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cohortgen::{Cohort, LabelRules, PatientRecord, SessionMeta, Setting, Sex};
use crate::dsp::Spectrogram;
use crate::error::{config, data, io_err, CoreError, Result};
use crate::mim::MimWindow;
use crate::mim::MimEncoder;
use crate::nn::{Linear, Store, G};
use crate::profile::{BenchConfig, CohortConfig, Profile};
use crate::rng::{derive, derive_index, rng_from};
use crate::vqtok::TokenCache;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Disease,
    Medication,
    Feature,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Disease => "disease",
            Axis::Medication => "medication",
            Axis::Feature => "feature",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskRule {
    /// Diagnosis code name; chronicity comes from the vocabulary.
    Diagnosis(String),
    Medication(String),
    /// Report phrase scored present, absent or unmentioned.
    ReportFeature(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub id: String,
    pub axis: Axis,
    pub rule: TaskRule,
}

#[derive(Serialize, Deserialize)]
struct TaskFile {
    task: Vec<TaskSpec>,
}

/// One task per planted diagnosis and medication code, plus one report
/// feature per findings phenotype.
pub fn default_tasks(cfg: &CohortConfig) -> Vec<TaskSpec> {
    let mut out = Vec::new();
    for p in &cfg.phenotypes {
        for d in &p.diagnoses {
            out.push(TaskSpec {
                id: d.clone(),
                axis: Axis::Disease,
                rule: TaskRule::Diagnosis(d.clone()),
            });
        }
        for m in &p.medications {
            out.push(TaskSpec {
                id: m.clone(),
                axis: Axis::Medication,
                rule: TaskRule::Medication(m.clone()),
            });
        }
    }
    for p in cfg.phenotypes.iter().filter(|p| !p.history) {
        if let Some(ph) = p.report_phrases.first() {
            out.push(TaskSpec {
                id: format!("report_{}", p.name),
                axis: Axis::Feature,
                rule: TaskRule::ReportFeature(ph.clone()),
            });
        }
    }
    out
}

pub fn tasks_to_toml(tasks: &[TaskSpec]) -> String {
    toml::to_string_pretty(&TaskFile { task: tasks.to_vec() }).expect("tasks serialize")
}

pub fn tasks_from_toml(text: &str) -> Result<Vec<TaskSpec>> {
    let f: TaskFile = toml::from_str(text).map_err(|e| CoreError::Config(format!("task file: {e}")))?;
    let mut seen = BTreeSet::new();
    for t in &f.task {
        if !seen.insert(&t.id) {
            return config(format!("duplicate task id {:?}", t.id));
        }
    }
    Ok(f.task)
}

pub fn load_tasks(path: &Path) -> Result<Vec<TaskSpec>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    tasks_from_toml(&text).map_err(|e| CoreError::Config(format!("{}: {e}", path.display())))
}

/// Checks every code a task names against the cohort vocabularies.
pub fn validate_tasks(tasks: &[TaskSpec], cfg: &CohortConfig) -> Result<()> {
    for t in tasks {
        match &t.rule {
            TaskRule::Diagnosis(n) if !cfg.diagnoses.iter().any(|d| &d.name == n) => {
                return config(format!("task {}: unknown diagnosis {n:?}", t.id));
            }
            TaskRule::Medication(n) if !cfg.medications.contains(n) => {
                return config(format!("task {}: unknown medication {n:?}", t.id));
            }
            TaskRule::ReportFeature(p) if p.trim().is_empty() => {
                return config(format!("task {}: empty report phrase", t.id));
            }
            _ => {}
        }
    }
    Ok(())
}

/// Phenotypes whose codes or phrases define the task.
pub fn task_phenotypes(task: &TaskSpec, cfg: &CohortConfig) -> Vec<usize> {
    cfg.phenotypes
        .iter()
        .enumerate()
        .filter(|(_, p)| match &task.rule {
            TaskRule::Diagnosis(n) => p.diagnoses.contains(n),
            TaskRule::Medication(n) => p.medications.contains(n),
            TaskRule::ReportFeature(ph) => p.report_phrases.contains(ph),
        })
        .map(|(i, _)| i)
        .collect()
}

/// Largest planted spectral effect behind a task, in dB.
pub fn task_effect_db(task: &TaskSpec, cfg: &CohortConfig) -> f64 {
    task_phenotypes(task, cfg)
        .into_iter()
        .map(|i| cfg.phenotypes[i].max_effect_db())
        .fold(0.0, f64::max)
}

pub fn rules_from(cfg: &BenchConfig) -> LabelRules {
    LabelRules {
        non_chronic_days: cfg.non_chronic_days,
        inpatient_days: cfg.inpatient_days,
        min_encounters: cfg.min_encounters,
    }
}

/// `Some(true)` when the report affirms the phrase, `Some(false)` when every
/// mention is negated, `None` when it is not mentioned.
pub fn report_mentions(report: &str, phrase: &str) -> Option<bool> {
    let lower = report.to_lowercase();
    let phrase = phrase.to_lowercase();
    let mut seen = false;
    for sentence in lower.split(['.', ';', '\n']) {
        if let Some(at) = sentence.find(&phrase) {
            seen = true;
            let before = &sentence[..at];
            let negated = before
                .split_whitespace()
                .any(|w| matches!(w, "no" | "not" | "without" | "absent"));
            if !negated {
                return Some(true);
            }
        }
    }
    seen.then_some(false)
}

/// Label of one session, or `None` when the task cannot be scored there.
pub fn session_label(task: &TaskSpec, cohort: &Cohort, session: &SessionMeta, rules: &LabelRules) -> Option<bool> {
    let record = cohort.patient(session.patient_id);
    let cfg = &cohort.config;
    match &task.rule {
        TaskRule::Diagnosis(n) => {
            let code = cohort.dx_index(n)?;
            Some(rules.diagnosis_active(record, code, cfg.diagnoses[code].chronic, session.day))
        }
        TaskRule::Medication(n) => {
            let code = cohort.med_index(n)?;
            Some(rules.medication_active(record, code, session.day))
        }
        TaskRule::ReportFeature(ph) => session.report.as_deref().and_then(|r| report_mentions(r, ph)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Labeled {
    pub patient_id: u32,
    pub session_id: u32,
    pub label: bool,
}

/// One scored session per patient: the earliest one with a defined label.
pub fn label_patients(task: &TaskSpec, cohort: &Cohort, rules: &LabelRules) -> Vec<Labeled> {
    let mut by_patient: BTreeMap<u32, (i64, Labeled)> = BTreeMap::new();
    for s in &cohort.sessions {
        let Some(label) = session_label(task, cohort, s, rules) else { continue };
        let row = Labeled {
            patient_id: s.patient_id,
            session_id: s.session_id,
            label,
        };
        let e = by_patient.entry(s.patient_id).or_insert((s.day, row));
        if s.day < e.0 {
            *e = (s.day, row);
        }
    }
    by_patient.into_values().map(|(_, r)| r).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(CoreError::Data(format!("unknown split {other:?}"))),
        }
    }
}

/// Patient-level partition with rounded train and validation counts; the
/// remainder is test.
pub fn patient_split(patients: &[u32], ratios: [f64; 3], seed: u64) -> BTreeMap<u32, Split> {
    let mut ids: Vec<u32> = patients.to_vec();
    ids.sort_unstable();
    ids.dedup();
    ids.shuffle(&mut rng_from(seed));
    let n = ids.len();
    let n_train = ((ratios[0] * n as f64).round() as usize).min(n);
    let n_val = ((ratios[1] * n as f64).round() as usize).min(n - n_train);
    ids.iter()
        .enumerate()
        .map(|(i, &p)| {
            let s = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            (p, s)
        })
        .collect()
}

/// Matching covariates: age bin, sex, site and care setting.
pub type MatchKey = (usize, Sex, usize, Setting);

pub fn match_key(r: &PatientRecord) -> MatchKey {
    (r.age_bin(), r.sex, r.site, r.setting)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortRow {
    pub patient_id: u32,
    pub session_id: u32,
    pub label: bool,
    /// Index of the case this row belongs to.
    pub group: u32,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CohortTable {
    pub task: String,
    pub rows: Vec<CohortRow>,
    /// Cases kept without any eligible control.
    pub unmatched: usize,
}

impl CohortTable {
    pub const HEADER: &'static str = "patient_id\tsession_id\tlabel\tgroup\tsplit";

    pub fn to_tsv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            out.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", r.patient_id, r.session_id, r.label as u8, r.group, r.split.name()));
        }
        out
    }

    pub fn from_tsv(task: &str, text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            let f: Vec<&str> = line.split('\t').collect();
            let bad = || CoreError::Data(format!("cohort table {task} line {}: malformed row", i + 1));
            if f.len() != 5 {
                return Err(bad());
            }
            rows.push(CohortRow {
                patient_id: f[0].parse().map_err(|_| bad())?,
                session_id: f[1].parse().map_err(|_| bad())?,
                label: f[2] == "1",
                group: f[3].parse().map_err(|_| bad())?,
                split: Split::parse(f[4])?,
            });
        }
        Ok(Self {
            task: task.into(),
            rows,
            unmatched: 0,
        })
    }

    pub fn count(&self, split: Split, label: bool) -> usize {
        self.rows.iter().filter(|r| r.split == split && r.label == label).count()
    }
}

/// Up to `k` exactly matched controls per case, drawn without replacement.
/// Inputs are sorted first so the table does not depend on their order.
pub fn match_controls(
    cases: &[Labeled],
    pool: &[Labeled],
    k: usize,
    seed: u64,
    cohort: &Cohort,
    split: &BTreeMap<u32, Split>,
) -> CohortTable {
    let mut cases = cases.to_vec();
    cases.sort_by_key(|c| c.patient_id);
    let mut pool = pool.to_vec();
    pool.sort_by_key(|c| c.patient_id);
    pool.dedup_by_key(|c| c.patient_id);
    let mut by_key: BTreeMap<MatchKey, Vec<Labeled>> = BTreeMap::new();
    for c in &pool {
        by_key.entry(match_key(cohort.patient(c.patient_id))).or_default().push(*c);
    }
    let case_ids: BTreeSet<u32> = cases.iter().map(|c| c.patient_id).collect();
    let mut used = BTreeSet::new();
    let mut table = CohortTable::default();
    let tag = |p: u32| split.get(&p).copied().unwrap_or(Split::Train);
    for (g, case) in cases.iter().enumerate() {
        let g = g as u32;
        table.rows.push(CohortRow {
            patient_id: case.patient_id,
            session_id: case.session_id,
            label: true,
            group: g,
            split: tag(case.patient_id),
        });
        let mut eligible: Vec<Labeled> = by_key
            .get(&match_key(cohort.patient(case.patient_id)))
            .map(|v| {
                v.iter()
                    .filter(|c| !used.contains(&c.patient_id) && !case_ids.contains(&c.patient_id))
                    .copied()
                    .collect()
            })
            .unwrap_or_default();
        eligible.shuffle(&mut rng_from(derive_index(seed, case.patient_id as u64)));
        eligible.truncate(k);
        if eligible.is_empty() {
            log::info!("case {} has no eligible control", case.patient_id);
            table.unmatched += 1;
        }
        for c in eligible {
            used.insert(c.patient_id);
            table.rows.push(CohortRow {
                patient_id: c.patient_id,
                session_id: c.session_id,
                label: false,
                group: g,
                split: tag(c.patient_id),
            });
        }
    }
    table
}

/// Labels, then matched controls, for one task.
pub fn build_table(task: &TaskSpec, cohort: &Cohort, rules: &LabelRules, split: &BTreeMap<u32, Split>, cfg: &BenchConfig) -> CohortTable {
    let labeled = label_patients(task, cohort, rules);
    let (cases, pool): (Vec<Labeled>, Vec<Labeled>) = labeled.into_iter().partition(|l| l.label);
    let seed = derive(cfg.split_seed, &task.id);
    let mut t = match_controls(&cases, &pool, cfg.controls_per_case, seed, cohort, split);
    t.task = task.id.clone();
    t
}

/// No-leakage and matching audits.
pub fn audit_table(table: &CohortTable, cohort: &Cohort, split: &BTreeMap<u32, Split>) -> Result<()> {
    let mut seen = BTreeMap::new();
    for r in &table.rows {
        if let Some(s) = seen.insert(r.patient_id, r.split) {
            return Err(CoreError::Data(format!(
                "task {}: patient {} appears twice ({} and {})",
                table.task,
                r.patient_id,
                s.name(),
                r.split.name()
            )));
        }
        if split.get(&r.patient_id) != Some(&r.split) {
            return Err(CoreError::Data(format!("task {}: patient {} carries the wrong split tag", table.task, r.patient_id)));
        }
    }
    let mut case_key = BTreeMap::new();
    for r in table.rows.iter().filter(|r| r.label) {
        case_key.insert(r.group, match_key(cohort.patient(r.patient_id)));
    }
    for r in table.rows.iter().filter(|r| !r.label) {
        if case_key.get(&r.group) != Some(&match_key(cohort.patient(r.patient_id))) {
            return Err(CoreError::Data(format!("task {}: control {} does not match its case", table.task, r.patient_id)));
        }
    }
    Ok(())
}

/// Rank-statistic AUROC with average ranks for ties; `None` without both
/// classes.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    let rank_sum: f64 = (0..scores.len()).filter(|&k| labels[k]).map(|k| ranks[k]).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

pub fn balanced_accuracy(scores: &[f64], labels: &[bool], threshold: f64) -> f64 {
    let (mut tp, mut p, mut tn, mut n) = (0.0, 0.0, 0.0, 0.0);
    for (&s, &l) in scores.iter().zip(labels) {
        if l {
            p += 1.0;
            tp += (s >= threshold) as u8 as f64;
        } else {
            n += 1.0;
            tn += (s < threshold) as u8 as f64;
        }
    }
    let sens = if p > 0.0 { tp / p } else { 0.0 };
    let spec = if n > 0.0 { tn / n } else { 0.0 };
    (sens + spec) / 2.0
}

/// Threshold maximizing balanced accuracy; ties go to the lowest threshold.
pub fn best_threshold(scores: &[f64], labels: &[bool]) -> f64 {
    let mut cands: Vec<f64> = scores.to_vec();
    cands.push(f64::INFINITY);
    cands.sort_by(f64::total_cmp);
    cands.dedup();
    cands
        .into_iter()
        .fold((f64::INFINITY, -1.0), |best, t| {
            let b = balanced_accuracy(scores, labels, t);
            if b > best.1 {
                (t, b)
            } else {
                best
            }
        })
        .0
}

/// Windowing and pooling shared by every encoder under evaluation.
pub struct SessionEmbedder<'a> {
    pub enc: &'a MimEncoder,
    pub store: &'a Store,
    stride_cols: usize,
    max_cols: Option<usize>,
    keep: Option<Vec<bool>>,
}

impl<'a> SessionEmbedder<'a> {
    pub fn new(enc: &'a MimEncoder, store: &'a Store, profile: &Profile) -> Result<Self> {
        let cfg = &profile.bench;
        let stride = profile.dsp.stride as f64 / profile.dsp.sample_rate;
        let pw = profile.mim.patch_w;
        let window_frames = (cfg.window_s / stride).round() as usize;
        if window_frames != enc.dims.grid_w * pw {
            return config(format!(
                "bench window of {} s spans {window_frames} frames but the encoder window is {} frames",
                cfg.window_s,
                enc.dims.grid_w * pw
            ));
        }
        let stride_cols = (((cfg.stride_s / stride).round() as usize) / pw).max(1);
        let max_cols = (cfg.max_duration_s > 0.0).then(|| (((cfg.max_duration_s / stride).floor() as usize).div_ceil(pw)).max(1));
        let keep = (!cfg.channel_subset.is_empty()).then(|| {
            profile
                .cohort
                .channels
                .iter()
                .map(|c| cfg.channel_subset.contains(c))
                .collect()
        });
        Ok(Self {
            enc,
            store,
            stride_cols,
            max_cols,
            keep,
        })
    }

    pub fn channel_keep(&self) -> Option<&[bool]> {
        self.keep.as_deref()
    }

    /// Windows covering the (possibly trimmed) session.
    pub fn windows(&self, spec: &Spectrogram, cache: &TokenCache) -> Result<Vec<MimWindow>> {
        let mut cache = cache.clone();
        if let Some(m) = self.max_cols {
            cache.valid_w = cache.valid_w.min(m);
        }
        let mut out = Vec::new();
        let mut col = 0;
        loop {
            let mut w = MimWindow::at_column(&cache, spec, &self.enc.dims, col)?;
            if let Some(k) = &self.keep {
                w.mask_channels(k);
            }
            out.push(w);
            col += self.stride_cols;
            if col >= cache.valid_w {
                break;
            }
        }
        Ok(out)
    }

    /// Mean of per-window pooled embeddings.
    pub fn embed(&self, spec: &Spectrogram, cache: &TokenCache) -> Result<Vec<f32>> {
        let ws = self.windows(spec, cache)?;
        let per = self.enc.embed_windows(self.store, &ws)?;
        let d = per[0].len();
        let mut mean = vec![0f32; d];
        for v in &per {
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x / per.len() as f32;
            }
        }
        Ok(mean)
    }

    /// Embeddings of many sessions, split across threads.
    pub fn embed_all(&self, specs: &[Spectrogram], caches: &[TokenCache]) -> Result<Vec<Vec<f32>>> {
        let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(specs.len().max(1));
        let chunk = specs.len().div_ceil(threads).max(1);
        std::thread::scope(|s| {
            let handles: Vec<_> = specs
                .chunks(chunk)
                .zip(caches.chunks(chunk))
                .map(|(sp, ca)| s.spawn(move || sp.iter().zip(ca).map(|(a, b)| self.embed(a, b)).collect::<Result<Vec<_>>>()))
                .collect();
            let mut out = Vec::with_capacity(specs.len());
            for h in handles {
                out.extend(h.join().expect("embedding worker panicked")?);
            }
            Ok(out)
        })
    }
}

/// Two-layer MLP on standardized features.
pub struct Probe {
    store: Store,
    fc1: Linear,
    fc2: Linear,
    mean: Vec<f32>,
    scale: Vec<f32>,
    pub best_epoch: usize,
    pub val_auroc: Option<f64>,
}

fn stack(x: &[&[f32]]) -> Result<Tensor<f32>> {
    let d = x.first().map_or(0, |r| r.len());
    Ok(Tensor::new(&[x.len(), d], x.concat())?)
}

impl Probe {
    pub fn scores(&self, x: &[&[f32]]) -> Result<Vec<f64>> {
        if x.is_empty() {
            return Ok(Vec::new());
        }
        let rows: Vec<Vec<f32>> = x.iter().map(|r| self.standardize(r)).collect();
        let refs: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
        let mut g = G::new();
        let xv = g.constant(stack(&refs)?);
        let y = self.logits(&mut g, xv)?;
        Ok(g.value(y).data().iter().map(|&v| v as f64).collect())
    }

    fn standardize(&self, r: &[f32]) -> Vec<f32> {
        r.iter().zip(&self.mean).zip(&self.scale).map(|((x, m), s)| (x - m) / s).collect()
    }

    fn logits(&self, g: &mut G, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, &self.store, x)?;
        let h = g.relu(h);
        let y = self.fc2.forward(g, &self.store, h)?;
        let n = g.shape(y)[0];
        Ok(g.reshape(y, &[n])?)
    }
}

/// Mean binary cross-entropy of logits; zero on an empty set.
fn bce(logits: &[f64], labels: &[bool]) -> f64 {
    let n = logits.len().max(1) as f64;
    logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| z.max(0.0) - if y { z } else { 0.0 } + (-z.abs()).exp().ln_1p())
        .sum::<f64>()
        / n
}

/// Trains a probe, keeping the epoch with the best validation AUROC.
/// Ties go to the lower validation loss.
pub fn train_probe(train: (&[&[f32]], &[bool]), val: (&[&[f32]], &[bool]), cfg: &BenchConfig, seed: u64) -> Result<Probe> {
    let (xt, yt) = train;
    if xt.is_empty() {
        return data("probe has no training rows");
    }
    let d = xt[0].len();
    let mut rng = rng_from(seed);
    let mut mean = vec![0f32; d];
    let mut scale = vec![1f32; d];
    if cfg.standardize {
        for r in xt {
            for (m, v) in mean.iter_mut().zip(r.iter()) {
                *m += v / xt.len() as f32;
            }
        }
        let mut var = vec![0f32; d];
        for r in xt {
            for ((s, v), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
                *s += (v - m) * (v - m) / xt.len() as f32;
            }
        }
        scale = var.iter().map(|v| v.sqrt().max(1e-6)).collect();
    }
    let mut store = Store::new();
    let fc1 = Linear::scaled(&mut store, "probe.fc1", d, cfg.probe_hidden, true, 2f64.sqrt(), &mut rng);
    let fc2 = Linear::new(&mut store, "probe.fc2", cfg.probe_hidden, 1, true, &mut rng);
    let mut probe = Probe {
        store,
        fc1,
        fc2,
        mean,
        scale,
        best_epoch: 0,
        val_auroc: None,
    };
    let xs: Vec<Vec<f32>> = xt.iter().map(|r| probe.standardize(r)).collect();
    let mut opt = Adam::new(&probe.store, AdamConfig::adamw(cfg.probe_lr, 0.9, 0.999, cfg.probe_weight_decay));
    let mut best: Option<((f64, f64), Store, usize)> = None;
    let mut order: Vec<usize> = (0..xs.len()).collect();
    for epoch in 0..cfg.probe_epochs.max(1) {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.probe_batch.max(1)) {
            let rows: Vec<&[f32]> = chunk.iter().map(|&i| xs[i].as_slice()).collect();
            let targets: Vec<f64> = chunk.iter().map(|&i| yt[i] as u8 as f64).collect();
            let mut g = G::new();
            let x = g.constant(stack(&rows)?);
            let y = probe.logits(&mut g, x)?;
            let loss = g.bce_with_logits(y, &targets)?;
            if !g.scalar(loss).is_finite() {
                return Err(CoreError::Numeric("probe loss".into()));
            }
            let grads = g.backward(loss)?.param_grads(&probe.store);
            opt.step(&mut probe.store, &grads)?;
        }
        let vs = probe.scores(val.0)?;
        let key = (auroc(&vs, val.1).unwrap_or(f64::NEG_INFINITY), -bce(&vs, val.1));
        if best.as_ref().is_none_or(|(b, _, _)| key > *b) {
            best = Some((key, probe.store.clone(), epoch));
        }
    }
    if let Some(((v, _), store, epoch)) = best {
        probe.store = store;
        probe.best_epoch = epoch;
        probe.val_auroc = v.is_finite().then_some(v);
    }
    Ok(probe)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub model: String,
    pub task: String,
    pub axis: Axis,
    pub seed: usize,
    pub auroc: Option<f64>,
    pub bacc: Option<f64>,
    pub n_train: usize,
    pub n_test: usize,
    /// Why the task was not scored.
    pub skipped: Option<String>,
}

/// Probes one task table with session embeddings looked up by session id.
pub fn run_task(model: &str, task: &TaskSpec, table: &CohortTable, emb: &BTreeMap<u32, Vec<f32>>, cfg: &BenchConfig, seed: usize) -> Result<TaskResult> {
    let mut res = TaskResult {
        model: model.into(),
        task: task.id.clone(),
        axis: task.axis,
        seed,
        auroc: None,
        bacc: None,
        n_train: 0,
        n_test: 0,
        skipped: None,
    };
    for s in [Split::Val, Split::Test] {
        let p = table.count(s, true);
        if p < cfg.min_positives {
            res.skipped = Some(format!("{} positives in {} (< {})", p, s.name(), cfg.min_positives));
            return Ok(res);
        }
    }
    let part = |s: Split| -> Result<(Vec<&[f32]>, Vec<bool>)> {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for r in table.rows.iter().filter(|r| r.split == s) {
            let e = emb
                .get(&r.session_id)
                .ok_or_else(|| CoreError::Data(format!("no embedding for session {}", r.session_id)))?;
            x.push(e.as_slice());
            y.push(r.label);
        }
        Ok((x, y))
    };
    let (xt, yt) = part(Split::Train)?;
    let (xv, yv) = part(Split::Val)?;
    let (xs, ys) = part(Split::Test)?;
    res.n_train = xt.len();
    res.n_test = xs.len();
    if !yt.iter().any(|&l| l) || yt.iter().all(|&l| l) {
        res.skipped = Some("training split lacks one class".into());
        return Ok(res);
    }
    let probe = train_probe((&xt, &yt), (&xv, &yv), cfg, derive_index(derive(cfg.split_seed, &task.id), seed as u64))?;
    let t = best_threshold(&probe.scores(&xv)?, &yv);
    let st = probe.scores(&xs)?;
    res.auroc = auroc(&st, &ys);
    res.bacc = Some(balanced_accuracy(&st, &ys, t));
    Ok(res)
}

/// Every task under every seed.
pub fn benchmark_run(model: &str, tables: &[(TaskSpec, CohortTable)], emb: &BTreeMap<u32, Vec<f32>>, cfg: &BenchConfig) -> Result<Vec<TaskResult>> {
    let mut out = Vec::new();
    for (task, table) in tables {
        for seed in 0..cfg.seeds.max(1) {
            out.push(run_task(model, task, table, emb, cfg, seed)?);
        }
    }
    Ok(out)
}

pub const RESULTS_HEADER: &str = "model\ttask\taxis\tseed\tauroc\tbacc\tn_train\tn_test\tskipped";

pub fn results_to_tsv(rs: &[TaskResult]) -> String {
    let f = |v: Option<f64>| v.map_or("NA".into(), |v| format!("{v:.6}"));
    let mut out = format!("{RESULTS_HEADER}\n");
    for r in rs {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.model,
            r.task,
            r.axis.name(),
            r.seed,
            f(r.auroc),
            f(r.bacc),
            r.n_train,
            r.n_test,
            r.skipped.as_deref().unwrap_or("")
        ));
    }
    out
}

pub fn results_from_tsv(text: &str) -> Result<Vec<TaskResult>> {
    let mut lines = text.lines();
    if lines.next() != Some(RESULTS_HEADER) {
        return data("results table has an unexpected header");
    }
    let opt = |s: &str| -> Result<Option<f64>> {
        if s == "NA" {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| CoreError::Data(format!("bad metric {s:?}")))
        }
    };
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != 9 {
                return data(format!("malformed results row {l:?}"));
            }
            let axis = match f[2] {
                "disease" => Axis::Disease,
                "medication" => Axis::Medication,
                "feature" => Axis::Feature,
                other => return data(format!("unknown axis {other:?}")),
            };
            let num = |s: &str| s.parse::<usize>().map_err(|_| CoreError::Data(format!("bad count {s:?}")));
            Ok(TaskResult {
                model: f[0].into(),
                task: f[1].into(),
                axis,
                seed: num(f[3])?,
                auroc: opt(f[4])?,
                bacc: opt(f[5])?,
                n_train: num(f[6])?,
                n_test: num(f[7])?,
                skipped: (!f[8].is_empty()).then(|| f[8].to_string()),
            })
        })
        .collect()
}

pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
    } else {
        0.0
    };
    (m, var.sqrt())
}

/// Per-task and per-axis aggregates. Axis rows average each seed's task
/// means, then report mean±sd across seeds.
pub fn summary_table(rs: &[TaskResult]) -> String {
    let mut out = String::from("model\tscope\tname\tauroc_mean\tauroc_sd\tbacc_mean\tbacc_sd\tn\n");
    let models: BTreeSet<&str> = rs.iter().map(|r| r.model.as_str()).collect();
    for m in models {
        let mine: Vec<&TaskResult> = rs.iter().filter(|r| r.model == m && r.auroc.is_some()).collect();
        let tasks: BTreeSet<&str> = mine.iter().map(|r| r.task.as_str()).collect();
        for t in &tasks {
            let a: Vec<f64> = mine.iter().filter(|r| r.task == *t).filter_map(|r| r.auroc).collect();
            let b: Vec<f64> = mine.iter().filter(|r| r.task == *t).filter_map(|r| r.bacc).collect();
            let (am, asd) = mean_sd(&a);
            let (bm, bsd) = mean_sd(&b);
            out.push_str(&format!("{m}\ttask\t{t}\t{am:.4}\t{asd:.4}\t{bm:.4}\t{bsd:.4}\t{}\n", a.len()));
        }
        let scopes: Vec<(String, Vec<&TaskResult>)> = [Axis::Disease, Axis::Medication, Axis::Feature]
            .iter()
            .map(|&ax| (ax.name().to_string(), mine.iter().copied().filter(|r| r.axis == ax).collect::<Vec<_>>()))
            .chain(std::iter::once(("overall".to_string(), mine.clone())))
            .filter(|(_, v)| !v.is_empty())
            .collect();
        for (name, rows) in scopes {
            let seeds: BTreeSet<usize> = rows.iter().map(|r| r.seed).collect();
            let per_seed = |f: fn(&TaskResult) -> Option<f64>| -> Vec<f64> {
                seeds
                    .iter()
                    .map(|&s| {
                        let v: Vec<f64> = rows.iter().filter(|r| r.seed == s).filter_map(|r| f(r)).collect();
                        v.iter().sum::<f64>() / v.len().max(1) as f64
                    })
                    .collect()
            };
            let (am, asd) = mean_sd(&per_seed(|r| r.auroc));
            let (bm, bsd) = mean_sd(&per_seed(|r| r.bacc));
            let scope = if name == "overall" { "overall" } else { "axis" };
            out.push_str(&format!("{m}\t{scope}\t{name}\t{am:.4}\t{asd:.4}\t{bm:.4}\t{bsd:.4}\t{}\n", seeds.len()));
        }
    }
    out
}
