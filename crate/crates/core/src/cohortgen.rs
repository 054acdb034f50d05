//! Synthetic clinical cohort: demographics, timestamped EHR events, templated
//! reports and multi-channel waveforms with planted spectral phenotypes.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{config, data, io_err, CoreError, Result};
use crate::profile::CohortConfig;
use crate::rng::{derive, derive_index, rng_from, StageRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectralEffect {
    pub band: [f64; 2],
    pub channels: Vec<String>,
    pub power_delta_db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhenotypeSpec {
    pub name: String,
    pub spectral_effects: Vec<SpectralEffect>,
    pub diagnoses: Vec<String>,
    pub medications: Vec<String>,
    pub report_phrases: Vec<String>,
    /// Phrases go in the clinical history rather than the findings.
    pub history: bool,
    pub prevalence: f64,
}

impl PhenotypeSpec {
    pub fn validate(&self, channels: &[String], nyquist: f64) -> Result<()> {
        if !(0.0..1.0).contains(&self.prevalence) {
            return config(format!("phenotype {}: prevalence {} outside [0,1)", self.name, self.prevalence));
        }
        for e in &self.spectral_effects {
            let [lo, hi] = e.band;
            if !(0.0 <= lo && lo < hi && hi <= nyquist) {
                return config(format!("phenotype {}: band [{lo}, {hi}] invalid", self.name));
            }
            if e.channels.is_empty() {
                return config(format!("phenotype {}: empty channel subset", self.name));
            }
            if let Some(c) = e.channels.iter().find(|c| !channels.contains(c)) {
                return config(format!("phenotype {}: unknown channel {c:?}", self.name));
            }
        }
        Ok(())
    }

    /// Largest absolute planted effect.
    pub fn max_effect_db(&self) -> f64 {
        self.spectral_effects
            .iter()
            .map(|e| e.power_delta_db.abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DxCode {
    pub name: String,
    pub chronic: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sex {
    F,
    M,
    Unknown,
}

impl Sex {
    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Setting {
    Icu,
    Emu,
    Routine,
}

pub const RACES: [&str; 8] = [
    "American Indian or Alaska Native",
    "Asian",
    "Black or African American",
    "Multiracial",
    "Native Hawaiian or Other Pacific Islander",
    "Other Race",
    "White",
    "Unavailable",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DxSource {
    Encounter,
    ProblemList,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DxEvent {
    pub code: usize,
    pub day: i64,
    pub source: DxSource,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MedSetting {
    Inpatient,
    Outpatient,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MedEvent {
    pub code: usize,
    pub start: i64,
    pub end: i64,
    pub setting: MedSetting,
    pub prn: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: u32,
    pub age_years: u32,
    pub sex: Sex,
    pub race: usize,
    pub site: usize,
    pub setting: Setting,
    /// Indices of the phenotypes this patient carries.
    pub phenotypes: Vec<usize>,
    /// Every diagnosis code recorded anywhere in the chart.
    pub diagnoses: BTreeSet<usize>,
    /// Every medication code recorded anywhere in the chart.
    pub medications: BTreeSet<usize>,
    pub dx_events: Vec<DxEvent>,
    pub med_events: Vec<MedEvent>,
    pub gain_db: f64,
}

impl PatientRecord {
    /// Age decade bin 0..=9; 10 is reserved for unknown age.
    pub fn age_bin(&self) -> usize {
        (self.age_years / 10).min(9) as usize
    }

    pub fn has_phenotype(&self, p: usize) -> bool {
        self.phenotypes.contains(&p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub session_id: u32,
    pub patient_id: u32,
    pub day: i64,
    pub channel_available: Vec<bool>,
    pub duration_s: f64,
    pub report: Option<String>,
}

/// Multi-channel waveform in microvolts, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSession {
    pub session_id: u32,
    pub patient_id: u32,
    pub sample_rate: f64,
    pub channel_available: Vec<bool>,
    pub samples: Vec<Vec<f32>>,
}

impl RawSession {
    pub fn channels(&self) -> usize {
        self.samples.len()
    }

    pub fn len(&self) -> usize {
        self.samples.first().map_or(0, |c| c.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.sample_rate
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() || self.channel_available.len() != self.samples.len() {
            return data(format!("session {}: channel count mismatch", self.session_id));
        }
        let t = self.len();
        if self.samples.iter().any(|c| c.len() != t) {
            return data(format!("session {}: ragged channels", self.session_id));
        }
        if !self.channel_available.iter().any(|&a| a) {
            return data(format!("session {}: no available channel", self.session_id));
        }
        if self.samples.iter().flatten().any(|v| !v.is_finite()) {
            return data(format!("session {}: non-finite sample", self.session_id));
        }
        Ok(())
    }
}

/// Timing rules shared by benchmark labels and alignment inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabelRules {
    pub non_chronic_days: i64,
    pub inpatient_days: i64,
    pub min_encounters: usize,
}

impl Default for LabelRules {
    fn default() -> Self {
        Self {
            non_chronic_days: 7,
            inpatient_days: 1,
            min_encounters: 2,
        }
    }
}

impl LabelRules {
    /// Whether diagnosis `code` counts as present at `day`.
    pub fn diagnosis_active(&self, record: &PatientRecord, code: usize, chronic: bool, day: i64) -> bool {
        let in_window = |d: i64| d <= day && (chronic || d >= day - self.non_chronic_days);
        let mut days = BTreeSet::new();
        for e in record.dx_events.iter().filter(|e| e.code == code && in_window(e.day)) {
            match e.source {
                DxSource::ProblemList => return true,
                DxSource::Encounter => {
                    days.insert(e.day);
                }
            }
        }
        days.len() >= self.min_encounters
    }

    /// Whether medication `code` counts as taken at `day`.
    pub fn medication_active(&self, record: &PatientRecord, code: usize, day: i64) -> bool {
        record.med_events.iter().any(|m| {
            m.code == code
                && !m.prn
                && match m.setting {
                    MedSetting::Outpatient => m.start <= day && day <= m.end,
                    MedSetting::Inpatient => m.start <= day && m.end >= day - self.inpatient_days,
                }
        })
    }

    pub fn active_diagnoses(&self, record: &PatientRecord, vocab: &[DxCode], day: i64) -> Vec<usize> {
        record
            .diagnoses
            .iter()
            .copied()
            .filter(|&c| self.diagnosis_active(record, c, vocab[c].chronic, day))
            .collect()
    }

    pub fn active_medications(&self, record: &PatientRecord, day: i64) -> Vec<usize> {
        record
            .medications
            .iter()
            .copied()
            .filter(|&c| self.medication_active(record, c, day))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub seed: u64,
    pub config: CohortConfig,
    pub patients: Vec<PatientRecord>,
    pub sessions: Vec<SessionMeta>,
}

impl Cohort {
    pub fn phenotypes(&self) -> &[PhenotypeSpec] {
        &self.config.phenotypes
    }

    pub fn patient(&self, id: u32) -> &PatientRecord {
        &self.patients[id as usize]
    }

    pub fn dx_index(&self, name: &str) -> Option<usize> {
        self.config.diagnoses.iter().position(|d| d.name == name)
    }

    pub fn med_index(&self, name: &str) -> Option<usize> {
        self.config.medications.iter().position(|m| m == name)
    }

    pub fn sessions_of(&self, patient: u32) -> impl Iterator<Item = &SessionMeta> {
        self.sessions.iter().filter(move |s| s.patient_id == patient)
    }

    /// Waveform of one session, regenerated from its derived seed.
    pub fn synthesize(&self, session: &SessionMeta) -> RawSession {
        synthesize_session(&self.config, self.seed, self.patient(session.patient_id), session)
    }

    /// Streams every session's waveform in order.
    pub fn raw_sessions(&self) -> impl Iterator<Item = RawSession> + '_ {
        self.sessions.iter().map(|s| self.synthesize(s))
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| CoreError::Data(e.to_string()))?;
        std::fs::write(path, text).map_err(io_err(path))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| CoreError::Data(format!("{}: {e}", path.display())))
    }

    /// One row per EHR event.
    pub fn ehr_table(&self) -> String {
        let mut out = String::from("patient_id\tkind\tcode\tstart_day\tend_day\tprn\n");
        for p in &self.patients {
            for e in &p.dx_events {
                let kind = match e.source {
                    DxSource::Encounter => "dx_encounter",
                    DxSource::ProblemList => "dx_problem_list",
                };
                let name = &self.config.diagnoses[e.code].name;
                out.push_str(&format!("{}\t{kind}\t{name}\t{}\t{}\tfalse\n", p.patient_id, e.day, e.day));
            }
            for m in &p.med_events {
                let kind = match m.setting {
                    MedSetting::Inpatient => "med_inpatient",
                    MedSetting::Outpatient => "med_outpatient",
                };
                let name = &self.config.medications[m.code];
                out.push_str(&format!("{}\t{kind}\t{name}\t{}\t{}\t{}\n", p.patient_id, m.start, m.end, m.prn));
            }
        }
        out
    }

    pub fn demographics_table(&self) -> String {
        let mut out = String::from("patient_id\tage\tsex\trace\tsite\tsetting\n");
        for p in &self.patients {
            out.push_str(&format!(
                "{}\t{}\t{:?}\t{}\t{}\t{:?}\n",
                p.patient_id, p.age_years, p.sex, RACES[p.race], p.site, p.setting
            ));
        }
        out
    }

    pub fn vocab_tables(&self) -> (String, String) {
        let mut dx = String::from("id\tname\tchronic\n");
        for (i, d) in self.config.diagnoses.iter().enumerate() {
            dx.push_str(&format!("{i}\t{}\t{}\n", d.name, d.chronic));
        }
        let mut med = String::from("id\tname\n");
        for (i, m) in self.config.medications.iter().enumerate() {
            med.push_str(&format!("{i}\t{m}\n"));
        }
        (dx, med)
    }
}

/// Draws the patient table, EHR events, session schedule and reports. Waveforms
/// are produced lazily by [`Cohort::synthesize`].
pub fn generate_cohort(cfg: &CohortConfig, seed: u64) -> Result<Cohort> {
    if cfg.patients == 0 {
        return config("cohort needs at least one patient");
    }
    if cfg.phenotypes.is_empty() {
        return config("cohort needs at least one phenotype");
    }
    if cfg.channels.is_empty() || cfg.duration_s * cfg.sample_rate < 1.0 {
        return config("cohort needs channels and a positive duration");
    }
    for p in &cfg.phenotypes {
        p.validate(&cfg.channels, cfg.sample_rate / 2.0)?;
    }
    let dx_of = |name: &str| -> Result<usize> {
        cfg.diagnoses
            .iter()
            .position(|d| d.name == name)
            .ok_or_else(|| CoreError::Config(format!("diagnosis {name:?} not in vocabulary")))
    };
    let med_of = |name: &str| -> Result<usize> {
        cfg.medications
            .iter()
            .position(|m| m == name)
            .ok_or_else(|| CoreError::Config(format!("medication {name:?} not in vocabulary")))
    };
    let mut planted_dx = BTreeSet::new();
    let mut planted_med = BTreeSet::new();
    let mut pheno_codes = Vec::new();
    for p in &cfg.phenotypes {
        let dx = p.diagnoses.iter().map(|n| dx_of(n)).collect::<Result<Vec<_>>>()?;
        let med = p.medications.iter().map(|n| med_of(n)).collect::<Result<Vec<_>>>()?;
        planted_dx.extend(dx.iter().copied());
        planted_med.extend(med.iter().copied());
        pheno_codes.push((dx, med));
    }
    let free_dx: Vec<usize> = (0..cfg.diagnoses.len()).filter(|c| !planted_dx.contains(c)).collect();
    let free_med: Vec<usize> = (0..cfg.medications.len()).filter(|c| !planted_med.contains(c)).collect();

    let mut rng = rng_from(derive(seed, "cohort"));
    let mut report_rng = rng_from(derive(seed, "report-coin"));
    let gain = Normal::new(0.0, cfg.gain_jitter_db.max(0.0)).expect("finite sd");
    let mut patients = Vec::with_capacity(cfg.patients);
    let mut sessions = Vec::new();
    for pid in 0..cfg.patients as u32 {
        let age_years = rng.random_range(cfg.age_range[0]..=cfg.age_range[1]);
        let sex = match rng.random::<f64>() {
            x if x < 0.49 => Sex::F,
            x if x < 0.98 => Sex::M,
            _ => Sex::Unknown,
        };
        let race = rng.random_range(0..RACES.len());
        let site = rng.random_range(0..cfg.sites.max(1));
        let setting = match rng.random::<f64>() {
            x if x < 0.25 => Setting::Icu,
            x if x < 0.5 => Setting::Emu,
            _ => Setting::Routine,
        };
        let phenotypes: Vec<usize> = cfg
            .phenotypes
            .iter()
            .enumerate()
            .filter_map(|(i, p)| (rng.random::<f64>() < p.prevalence).then_some(i))
            .collect();
        let first_day: i64 = rng.random_range(1000..2000);
        let mut days = vec![first_day];
        if rng.random::<f64>() < cfg.multi_session_fraction {
            days.push(first_day + rng.random_range(30..400));
        }
        let last_day = *days.last().unwrap();

        let mut dx_events = Vec::new();
        let mut med_events = Vec::new();
        for (pi, (dx, med)) in pheno_codes.iter().enumerate() {
            let positive = phenotypes.contains(&pi);
            for &c in dx {
                let chronic = cfg.diagnoses[c].chronic;
                if positive {
                    plant_positive_dx(&mut rng, &mut dx_events, c, chronic, &days);
                } else if rng.random::<f64>() < cfg.distractor_prob {
                    plant_distractor_dx(&mut rng, &mut dx_events, c, chronic, first_day);
                }
            }
            for &c in med {
                if positive {
                    plant_positive_med(&mut rng, &mut med_events, c, &days);
                } else if rng.random::<f64>() < cfg.distractor_prob {
                    plant_distractor_med(&mut rng, &mut med_events, c, first_day);
                }
            }
        }
        if !free_dx.is_empty() && cfg.background_dx_mean > 0.0 {
            let n = Poisson::new(cfg.background_dx_mean).expect("positive mean").sample(&mut rng) as usize;
            for _ in 0..n {
                let c = free_dx[rng.random_range(0..free_dx.len())];
                let day = first_day - rng.random_range(0..900);
                let source = if rng.random::<f64>() < 0.4 { DxSource::ProblemList } else { DxSource::Encounter };
                dx_events.push(DxEvent { code: c, day, source });
                if source == DxSource::Encounter && rng.random::<f64>() < 0.5 {
                    dx_events.push(DxEvent { code: c, day: day + rng.random_range(1..60), source });
                }
            }
        }
        if !free_med.is_empty() && cfg.background_med_mean > 0.0 {
            let n = Poisson::new(cfg.background_med_mean).expect("positive mean").sample(&mut rng) as usize;
            for _ in 0..n {
                let c = free_med[rng.random_range(0..free_med.len())];
                let start = first_day - rng.random_range(0..600);
                let end = start + rng.random_range(5..900);
                let setting = if rng.random::<f64>() < 0.2 { MedSetting::Inpatient } else { MedSetting::Outpatient };
                let prn = rng.random::<f64>() < 0.2;
                med_events.push(MedEvent { code: c, start, end: end.max(start), setting, prn });
            }
        }
        let _ = last_day;
        let record = PatientRecord {
            patient_id: pid,
            age_years,
            sex,
            race,
            site,
            setting,
            phenotypes,
            diagnoses: dx_events.iter().map(|e| e.code).collect(),
            medications: med_events.iter().map(|e| e.code).collect(),
            dx_events,
            med_events,
            gain_db: gain.sample(&mut rng),
        };
        for &day in &days {
            let session_id = sessions.len() as u32;
            let mut avail: Vec<bool> = (0..cfg.channels.len())
                .map(|_| rng.random::<f64>() >= cfg.channel_missing_prob)
                .collect();
            if !avail.iter().any(|&a| a) {
                let keep = rng.random_range(0..avail.len());
                avail[keep] = true;
            }
            let report = (report_rng.random::<f64>() < cfg.report_fraction).then(|| {
                let mut brng = rng_from(derive_index(derive(seed, "boilerplate"), session_id as u64));
                make_report_text(&record, cfg, day, &mut brng)
            });
            sessions.push(SessionMeta {
                session_id,
                patient_id: pid,
                day,
                channel_available: avail,
                duration_s: cfg.duration_s,
                report,
            });
        }
        patients.push(record);
    }
    Ok(Cohort {
        seed,
        config: cfg.clone(),
        patients,
        sessions,
    })
}

fn distinct_days(rng: &mut StageRng, lo: i64, hi: i64, n: usize) -> Vec<i64> {
    let mut pool: Vec<i64> = (lo..=hi).collect();
    pool.shuffle(rng);
    pool.truncate(n);
    pool
}

fn plant_positive_dx(rng: &mut StageRng, out: &mut Vec<DxEvent>, code: usize, chronic: bool, days: &[i64]) {
    if chronic {
        let first = days[0];
        if rng.random::<f64>() < 0.5 {
            out.push(DxEvent { code, day: first - rng.random_range(0..1500), source: DxSource::ProblemList });
        } else {
            for day in distinct_days(rng, first - 400, first, 2) {
                out.push(DxEvent { code, day, source: DxSource::Encounter });
            }
        }
    } else {
        for &s in days {
            if rng.random::<f64>() < 0.3 {
                out.push(DxEvent { code, day: s - rng.random_range(0..=7), source: DxSource::ProblemList });
            } else {
                for day in distinct_days(rng, s - 7, s, 2) {
                    out.push(DxEvent { code, day, source: DxSource::Encounter });
                }
            }
        }
    }
}

/// Records that look like the code but fail the counting rules.
fn plant_distractor_dx(rng: &mut StageRng, out: &mut Vec<DxEvent>, code: usize, chronic: bool, first: i64) {
    if chronic || rng.random::<f64>() < 0.5 {
        out.push(DxEvent { code, day: first - rng.random_range(1..300), source: DxSource::Encounter });
    } else {
        for day in distinct_days(rng, first - 60, first - 30, 2) {
            out.push(DxEvent { code, day, source: DxSource::Encounter });
        }
    }
}

fn plant_positive_med(rng: &mut StageRng, out: &mut Vec<MedEvent>, code: usize, days: &[i64]) {
    if rng.random::<f64>() < 0.6 {
        let start = days[0] - rng.random_range(10..500);
        let end = days[days.len() - 1] + rng.random_range(10..300);
        out.push(MedEvent { code, start, end, setting: MedSetting::Outpatient, prn: false });
    } else {
        for &s in days {
            let start = s - rng.random_range(1..6);
            let end = s - rng.random_range(0..=1);
            out.push(MedEvent { code, start, end, setting: MedSetting::Inpatient, prn: false });
        }
    }
}

fn plant_distractor_med(rng: &mut StageRng, out: &mut Vec<MedEvent>, code: usize, first: i64) {
    match rng.random_range(0..3) {
        0 => out.push(MedEvent {
            code,
            start: first - 100,
            end: first + 100,
            setting: MedSetting::Outpatient,
            prn: true,
        }),
        1 => {
            let end = first - rng.random_range(5..20);
            out.push(MedEvent { code, start: end - 3, end, setting: MedSetting::Inpatient, prn: false });
        }
        _ => {
            let end = first - rng.random_range(10..100);
            out.push(MedEvent { code, start: end - 200, end, setting: MedSetting::Outpatient, prn: false });
        }
    }
}

const BOILERPLATE: [&str; 10] = [
    "The recording was obtained with scalp electrodes placed according to the international 10-20 system.",
    "Photic stimulation was performed.",
    "Hyperventilation was not performed.",
    "The patient was awake for the majority of the recording.",
    "Impedances were checked at the start of the study.",
    "Video was reviewed for clinical correlation.",
    "The technologist noted no clinical events.",
    "A single-lead electrocardiogram was recorded.",
    "Eye movement artifact is present intermittently.",
    "Muscle artifact is seen over the temporal regions.",
];

/// Dominant posterior rhythm frequency for an age.
pub fn alpha_hz(cfg: &CohortConfig, age_years: u32) -> f64 {
    cfg.alpha_hz_at_20 + cfg.alpha_hz_per_year * (age_years as f64 - 20.0).max(0.0)
}

fn pretty(code: &str) -> String {
    code.replace('_', " ")
}

/// Templated report for one session. Findings and history are a pure function
/// of the record; `rng` only orders the boilerplate.
pub fn make_report_text(record: &PatientRecord, cfg: &CohortConfig, day: i64, rng: &mut StageRng) -> String {
    let rules = LabelRules::default();
    let who = match record.sex {
        Sex::F => "woman",
        Sex::M => "man",
        Sex::Unknown => "patient",
    };
    let mut history = Vec::new();
    let mut med_phrases = Vec::new();
    let mut findings = Vec::new();
    let mut negatives = Vec::new();
    for (i, p) in cfg.phenotypes.iter().enumerate() {
        let positive = record.has_phenotype(i);
        match (p.history, positive) {
            (true, true) if p.diagnoses.is_empty() => med_phrases.extend(p.report_phrases.iter().cloned()),
            (true, true) => history.extend(p.report_phrases.iter().cloned()),
            (false, true) => findings.extend(p.report_phrases.iter().map(|ph| format!("There is {ph}."))),
            (false, false) => {
                if let Some(ph) = p.report_phrases.first() {
                    negatives.push(format!("No {ph} is seen."));
                }
            }
            (true, false) => {}
        }
    }
    let mut meds: Vec<String> = rules
        .active_medications(record, day)
        .into_iter()
        .map(|c| pretty(&cfg.medications[c]))
        .collect();
    for m in med_phrases {
        if !meds.contains(&m) {
            meds.push(m);
        }
    }

    let mut out = String::new();
    out.push_str(&format!("CLINICAL HISTORY: {}-year-old {who}", record.age_years));
    if history.is_empty() {
        out.push_str(" referred for routine evaluation.");
    } else {
        out.push_str(&format!(" with a history of {}.", history.join(" and ")));
    }
    if !meds.is_empty() {
        out.push_str(&format!(" MEDICATIONS: {}.", meds.join(", ")));
    }
    let mut bp: Vec<&str> = BOILERPLATE[..cfg.boilerplate_sentences.min(BOILERPLATE.len())].to_vec();
    bp.shuffle(rng);
    out.push_str(" TECHNIQUE:");
    for s in bp {
        out.push(' ');
        out.push_str(s);
    }
    out.push_str(&format!(
        " FINDINGS: The posterior dominant rhythm is {:.0} Hz.",
        alpha_hz(cfg, record.age_years)
    ));
    for s in findings.iter().chain(negatives.iter()) {
        out.push(' ');
        out.push_str(s);
    }
    if findings.is_empty() {
        out.push_str(" IMPRESSION: Normal study.");
    } else {
        out.push_str(" IMPRESSION: Abnormal study.");
    }
    out
}

/// Per-channel one-sided PSD (µV²/Hz) of the session's generating process at
/// frequency `f`, before random phases.
pub fn channel_psd(cfg: &CohortConfig, record: &PatientRecord, channel: usize, f: f64) -> f64 {
    let k2 = cfg.noise_knee_hz * cfg.noise_knee_hz;
    let base = |f: f64| cfg.noise_level * ((1.0 + k2) / (f * f + k2)).powf(-cfg.noise_slope / 2.0);
    let fa = alpha_hz(cfg, record.age_years);
    let name = &cfg.channels[channel];
    let alpha_gain = if cfg.alpha_channels.contains(name) { 1.0 } else { 0.125 };
    let bump = base(fa) * (10f64.powf(cfg.alpha_snr_db / 10.0) - 1.0) * alpha_gain;
    let w = cfg.alpha_width_hz;
    let mut s = base(f) + bump * (-(f - fa) * (f - fa) / (2.0 * w * w)).exp();
    let mut db = record.gain_db;
    if record.sex == Sex::F && (12.0..30.0).contains(&f) {
        db += cfg.sex_beta_db;
    }
    for &pi in &record.phenotypes {
        for e in &cfg.phenotypes[pi].spectral_effects {
            if f >= e.band[0] && f < e.band[1] && e.channels.contains(name) {
                db += e.power_delta_db;
            }
        }
    }
    s *= 10f64.powf(db / 10.0);
    s
}

fn synthesize_session(cfg: &CohortConfig, seed: u64, record: &PatientRecord, meta: &SessionMeta) -> RawSession {
    let fs = cfg.sample_rate;
    let t = (meta.duration_s * fs).round() as usize;
    let mut rng = rng_from(derive_index(derive(seed, "waveform"), meta.session_id as u64));
    let fft = FftPlanner::<f64>::new().plan_fft_inverse(t);
    let std = Normal::new(0.0, std::f64::consts::FRAC_1_SQRT_2).expect("finite sd");
    let line_phase = rng.random::<f64>() * 2.0 * PI;
    let mut samples = Vec::with_capacity(cfg.channels.len());
    for (c, &avail) in meta.channel_available.iter().enumerate() {
        let mut spec = vec![Complex64::new(0.0, 0.0); t];
        for k in 1..=t / 2 {
            let f = k as f64 * fs / t as f64;
            let amp = (channel_psd(cfg, record, c, f) * fs * t as f64 / 2.0).sqrt();
            let z = if 2 * k == t {
                Complex64::new(std.sample(&mut rng) * std::f64::consts::SQRT_2, 0.0)
            } else {
                Complex64::new(std.sample(&mut rng), std.sample(&mut rng))
            };
            spec[k] = z * amp;
            if 2 * k != t {
                spec[t - k] = spec[k].conj();
            }
        }
        if !avail {
            samples.push(vec![0.0; t]);
            continue;
        }
        fft.process(&mut spec);
        let scale = 1.0 / t as f64;
        let x: Vec<f32> = spec
            .iter()
            .enumerate()
            .map(|(n, v)| {
                let line = cfg.line_noise_uv * (2.0 * PI * 60.0 * n as f64 / fs + line_phase).sin();
                (v.re * scale + line) as f32
            })
            .collect();
        samples.push(x);
    }
    RawSession {
        session_id: meta.session_id,
        patient_id: meta.patient_id,
        sample_rate: fs,
        channel_available: meta.channel_available.clone(),
        samples,
    }
}

pub const WAVE_MAGIC: &[u8; 8] = b"CLEFRAW1";
const HEADER_LEN: usize = 64;

/// Writes the 64-byte header (magic, C, T, sample rate, channel mask, ids)
/// followed by channel-major little-endian f32 samples.
pub fn write_waveform<W: Write>(mut w: W, s: &RawSession) -> std::io::Result<()> {
    let c = s.channels();
    assert!(c <= 64, "channel mask holds at most 64 channels");
    let mut header = [0u8; HEADER_LEN];
    header[..8].copy_from_slice(WAVE_MAGIC);
    header[8..12].copy_from_slice(&(c as u32).to_le_bytes());
    header[12..20].copy_from_slice(&(s.len() as u64).to_le_bytes());
    header[20..28].copy_from_slice(&s.sample_rate.to_le_bytes());
    let mask = s
        .channel_available
        .iter()
        .enumerate()
        .fold(0u64, |m, (i, &a)| if a { m | (1 << i) } else { m });
    header[28..36].copy_from_slice(&mask.to_le_bytes());
    header[36..40].copy_from_slice(&s.session_id.to_le_bytes());
    header[40..44].copy_from_slice(&s.patient_id.to_le_bytes());
    w.write_all(&header)?;
    let mut buf = Vec::with_capacity(s.len() * 4);
    for ch in &s.samples {
        buf.clear();
        for v in ch {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_waveform<R: Read>(mut r: R) -> Result<RawSession> {
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header)
        .map_err(|e| CoreError::Data(format!("waveform header: {e}")))?;
    if &header[..8] != WAVE_MAGIC {
        return data("not a waveform file (bad magic)");
    }
    let c = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let t = u64::from_le_bytes(header[12..20].try_into().unwrap()) as usize;
    let fs = f64::from_le_bytes(header[20..28].try_into().unwrap());
    let mask = u64::from_le_bytes(header[28..36].try_into().unwrap());
    let session_id = u32::from_le_bytes(header[36..40].try_into().unwrap());
    let patient_id = u32::from_le_bytes(header[40..44].try_into().unwrap());
    if c == 0 || c > 64 {
        return data(format!("waveform channel count {c} out of range"));
    }
    let mut samples = Vec::with_capacity(c);
    let mut buf = vec![0u8; t * 4];
    for _ in 0..c {
        r.read_exact(&mut buf)
            .map_err(|e| CoreError::Data(format!("waveform payload: {e}")))?;
        samples.push(buf.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect());
    }
    let s = RawSession {
        session_id,
        patient_id,
        sample_rate: fs,
        channel_available: (0..c).map(|i| mask >> i & 1 == 1).collect(),
        samples,
    };
    s.validate()?;
    Ok(s)
}

pub fn save_waveform(path: &Path, s: &RawSession) -> Result<()> {
    let f = std::fs::File::create(path).map_err(io_err(path))?;
    write_waveform(std::io::BufWriter::new(f), s).map_err(io_err(path))
}

pub fn load_waveform(path: &Path) -> Result<RawSession> {
    let f = std::fs::File::open(path).map_err(io_err(path))?;
    read_waveform(std::io::BufReader::new(f)).map_err(|e| match e {
        CoreError::Data(m) => CoreError::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profile::Profile;

    fn small() -> CohortConfig {
        let mut c = Profile::desk().cohort;
        c.patients = 40;
        c.duration_s = 8.0;
        c
    }

    #[test]
    fn deterministic() {
        let cfg = small();
        let a = generate_cohort(&cfg, 7).unwrap();
        let b = generate_cohort(&cfg, 7).unwrap();
        assert_eq!(a, b);
        let wa: Vec<_> = a.raw_sessions().take(3).collect();
        let wb: Vec<_> = b.raw_sessions().take(3).collect();
        assert_eq!(wa, wb);
        let c = generate_cohort(&cfg, 8).unwrap();
        assert_ne!(a.patients, c.patients);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = small();
        cfg.patients = 0;
        assert!(generate_cohort(&cfg, 1).unwrap_err().to_string().contains("patient"));
        let mut cfg = small();
        cfg.phenotypes.clear();
        assert!(generate_cohort(&cfg, 1).unwrap_err().to_string().contains("phenotype"));
        let mut cfg = small();
        cfg.phenotypes[0].spectral_effects[0].band = [5.0, 2.0];
        assert!(generate_cohort(&cfg, 1).is_err());
    }

    #[test]
    fn zero_prevalence_has_no_positives() {
        let mut cfg = small();
        cfg.phenotypes[0].prevalence = 0.0;
        let c = generate_cohort(&cfg, 3).unwrap();
        assert!(c.patients.iter().all(|p| !p.has_phenotype(0)));
    }

    #[test]
    fn labels_consistent_with_phenotypes() {
        let cfg = Profile::desk().cohort;
        let c = generate_cohort(&cfg, 7).unwrap();
        let rules = LabelRules::default();
        for s in &c.sessions {
            let rec = c.patient(s.patient_id);
            for (pi, p) in cfg.phenotypes.iter().enumerate() {
                for d in &p.diagnoses {
                    let code = c.dx_index(d).unwrap();
                    let active = rules.diagnosis_active(rec, code, cfg.diagnoses[code].chronic, s.day);
                    assert_eq!(active, rec.has_phenotype(pi), "patient {} {}", rec.patient_id, p.name);
                }
                for m in &p.medications {
                    let code = c.med_index(m).unwrap();
                    assert_eq!(rules.medication_active(rec, code, s.day), rec.has_phenotype(pi));
                }
                if let (Some(report), true) = (&s.report, rec.has_phenotype(pi)) {
                    assert!(p.report_phrases.iter().any(|ph| report.contains(ph.as_str())));
                }
            }
        }
    }

    #[test]
    fn report_fraction_roughly_matches() {
        let c = generate_cohort(&Profile::desk().cohort, 7).unwrap();
        let frac = c.sessions.iter().filter(|s| s.report.is_some()).count() as f64 / c.sessions.len() as f64;
        assert!((frac - 0.593).abs() < 0.08, "{frac}");
        let multi = c.sessions.len() - c.patients.len();
        assert!(multi > 15 && multi < 70, "{multi}");
    }

    #[test]
    fn report_templates() {
        let cfg = small();
        let mut rec = generate_cohort(&cfg, 2).unwrap().patients[0].clone();
        rec.phenotypes.clear();
        rec.med_events.clear();
        let text = make_report_text(&rec, &cfg, 1500, &mut rng_from(1));
        assert!(text.contains("Normal study"));
        assert!(!text.contains("There is"));
        rec.phenotypes = vec![0];
        let a = make_report_text(&rec, &cfg, 1500, &mut rng_from(1));
        let b = make_report_text(&rec, &cfg, 1500, &mut rng_from(99));
        assert!(a.contains("generalized slowing"));
        // Only the boilerplate order may differ between seeds.
        let strip = |t: &str| {
            let mut t = t.to_string();
            for s in BOILERPLATE {
                t = t.replace(s, "");
            }
            t
        };
        assert_eq!(strip(&a), strip(&b));
        let (a, b) = (a.replace("TECHNIQUE: ", ""), b.replace("TECHNIQUE: ", ""));
        let mut sa: Vec<&str> = a.split(". ").collect();
        let mut sb: Vec<&str> = b.split(". ").collect();
        sa.sort();
        sb.sort();
        assert_eq!(sa, sb);
    }

    #[test]
    fn waveform_round_trip() {
        let c = generate_cohort(&small(), 5).unwrap();
        let s = c.synthesize(&c.sessions[1]);
        assert_eq!(s.len(), 1600);
        s.validate().unwrap();
        let mut buf = Vec::new();
        write_waveform(&mut buf, &s).unwrap();
        assert_eq!(buf.len(), 64 + 4 * 8 * 1600);
        assert_eq!(read_waveform(&buf[..]).unwrap(), s);
        buf[0] = b'X';
        assert!(read_waveform(&buf[..]).is_err());
    }

    #[test]
    fn rule_boundaries() {
        let cfg = small();
        let mut rec = generate_cohort(&cfg, 2).unwrap().patients[0].clone();
        rec.dx_events = vec![DxEvent { code: 1, day: 100, source: DxSource::Encounter }];
        let rules = LabelRules::default();
        assert!(!rules.diagnosis_active(&rec, 1, true, 200));
        rec.dx_events.push(DxEvent { code: 1, day: 101, source: DxSource::Encounter });
        assert!(rules.diagnosis_active(&rec, 1, true, 200));
        rec.dx_events = vec![DxEvent { code: 1, day: 200 - 3 * 365, source: DxSource::ProblemList }];
        assert!(rules.diagnosis_active(&rec, 1, true, 200));
        rec.dx_events = vec![DxEvent { code: 0, day: 170, source: DxSource::ProblemList }];
        assert!(!rules.diagnosis_active(&rec, 0, false, 200));
        assert!(rules.diagnosis_active(&rec, 0, false, 175));
        rec.med_events = vec![MedEvent { code: 2, start: 0, end: 500, setting: MedSetting::Outpatient, prn: true }];
        assert!(!rules.medication_active(&rec, 2, 200));
        rec.med_events[0].prn = false;
        assert!(rules.medication_active(&rec, 2, 200));
        rec.med_events = vec![MedEvent { code: 2, start: 190, end: 199, setting: MedSetting::Inpatient, prn: false }];
        assert!(rules.medication_active(&rec, 2, 200));
        assert!(!rules.medication_active(&rec, 2, 202));
    }
}
