//! Named hyperparameter bundles. Every tunable constant used by the pipeline
//! lives in exactly one field here.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cohortgen::{DxCode, PhenotypeSpec, SpectralEffect};
use crate::error::{config, io_err, CoreError, Result};

pub const PROFILE_NAMES: [&str; 4] = ["desk", "paper-small", "paper-base", "paper-large"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Profile {
    pub name: String,
    pub seed: u64,
    pub cohort: CohortConfig,
    pub dsp: DspConfig,
    pub tokenizer: TokenizerConfig,
    pub mim: MimConfig,
    pub align: AlignConfig,
    pub summarize: SummarizeConfig,
    pub bench: BenchConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortConfig {
    pub patients: usize,
    pub channels: Vec<String>,
    pub duration_s: f64,
    pub sample_rate: f64,
    /// Fraction of sessions with a linked report.
    pub report_fraction: f64,
    /// Fraction of patients with a second session.
    pub multi_session_fraction: f64,
    pub sites: usize,
    pub age_range: [u32; 2],
    /// Power-law exponent of the background spectrum.
    pub noise_slope: f64,
    pub noise_knee_hz: f64,
    /// Background one-sided PSD at 1 Hz, in µV²/Hz.
    pub noise_level: f64,
    /// Peak of the alpha bump above the background at the alpha frequency, dB.
    pub alpha_snr_db: f64,
    pub alpha_width_hz: f64,
    /// Alpha frequency at age 20 and its change per year after that.
    pub alpha_hz_at_20: f64,
    pub alpha_hz_per_year: f64,
    /// Channels where the alpha bump is strongest.
    pub alpha_channels: Vec<String>,
    pub sex_beta_db: f64,
    /// Standard deviation of a per-patient broadband gain, dB.
    pub gain_jitter_db: f64,
    /// Amplitude of injected mains interference, µV.
    pub line_noise_uv: f64,
    pub channel_missing_prob: f64,
    pub diagnoses: Vec<DxCode>,
    pub medications: Vec<String>,
    /// Mean number of unrelated background diagnosis and medication records.
    pub background_dx_mean: f64,
    pub background_med_mean: f64,
    /// Probability a phenotype-negative patient carries a near-miss record.
    pub distractor_prob: f64,
    pub boilerplate_sentences: usize,
    pub phenotypes: Vec<PhenotypeSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DspConfig {
    pub sample_rate: f64,
    pub band_lo_hz: f64,
    pub band_hi_hz: f64,
    pub filter_order: usize,
    pub notch_base_hz: f64,
    pub notch_q: f64,
    /// Notches closer than this to Nyquist are skipped.
    pub notch_nyquist_guard_hz: f64,
    pub window: usize,
    pub stride: usize,
    pub nw: f64,
    pub k_max: usize,
    pub retain_threshold: f64,
    pub freq_res_hz: f64,
    pub band_top_hz: f64,
    pub db_floor: f64,
    pub db_ceil: f64,
    pub log_eps: f64,
    /// Samples of reflection added before the first and after the last frame.
    pub pad_left: usize,
    pub pad_right: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerConfig {
    pub codebook_size: usize,
    pub latent_dim: usize,
    /// Channel width of each of the five encoder levels.
    pub level_channels: Vec<usize>,
    /// (freq, time) downsampling after each level.
    pub level_strides: Vec<[usize; 2]>,
    pub disc_channels: Vec<usize>,
    pub gamma_diff: f64,
    pub lambda_code: f64,
    pub lambda_commit: f64,
    pub adv_weight_max: f64,
    pub adv_eps: f64,
    /// Fixed multiplier on the adaptive adversarial weight.
    pub adv_factor: f64,
    pub disc_start: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch: usize,
    pub steps: u64,
    /// Time frames per training example.
    pub window_frames: usize,
    pub p_psg: f64,
    pub p_drop: f64,
    pub mask_ramp_steps: u64,
    pub psg_subset: Vec<String>,
    pub dead_code_steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MimConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub dropout: f64,
    pub dec_depth: usize,
    pub dec_dim: usize,
    pub dec_heads: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    /// Spectrogram frames per encoder window.
    pub window_frames: usize,
    pub mask_mu: f64,
    pub mask_sigma: f64,
    pub mask_bounds: [f64; 2],
    pub r_drop: f64,
    pub label_smoothing: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Overrides `epochs` when nonzero.
    pub steps: u64,
    pub warmup_steps: u64,
    pub proxy_in_pool: bool,
    pub grad_clip: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignConfig {
    pub proj_dim: usize,
    pub text_dim: usize,
    pub text_max_len: usize,
    pub text_ngram: usize,
    pub text_seed: u64,
    pub refiner_depth: usize,
    pub refiner_heads: usize,
    pub ehr_depth: usize,
    pub ehr_heads: usize,
    pub age_bins: usize,
    pub sex_categories: usize,
    pub race_categories: usize,
    pub n_conditions: usize,
    pub n_medications: usize,
    pub condition_slots: usize,
    pub medication_slots: usize,
    pub dedup_codes: bool,
    pub tau: f64,
    pub use_report: bool,
    pub use_ehr: bool,
    pub r_drop: f64,
    pub channel_masking: bool,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Overrides `epochs` when nonzero.
    pub steps: u64,
    pub grad_clip: f64,
    /// Benchmark task ids whose codes and phrases are hidden from alignment.
    pub holdout: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SummarizeConfig {
    pub lengths: Vec<usize>,
    pub prompts: Vec<String>,
    pub retries: usize,
    pub timeout_ms: u64,
    /// Prompt and length used to summarize reports for alignment.
    pub prompt: String,
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub split: [f64; 3],
    pub split_seed: u64,
    pub controls_per_case: usize,
    pub min_positives: usize,
    pub non_chronic_days: i64,
    pub inpatient_days: i64,
    pub min_encounters: usize,
    pub probe_hidden: usize,
    pub probe_lr: f64,
    pub probe_weight_decay: f64,
    pub probe_epochs: usize,
    pub probe_batch: usize,
    pub standardize: bool,
    pub seeds: usize,
    pub window_s: f64,
    pub stride_s: f64,
    /// Keep only the first this many seconds; 0 keeps everything.
    pub max_duration_s: f64,
    /// Restrict embedding to these channels; empty keeps the full montage.
    pub channel_subset: Vec<String>,
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn effect(band: [f64; 2], channels: &[&str], db: f64) -> SpectralEffect {
    SpectralEffect {
        band,
        channels: strings(channels),
        power_delta_db: db,
    }
}

const DESK_CHANNELS: [&str; 8] = ["F3", "F4", "C3", "C4", "T3", "T4", "O1", "O2"];
const FULL_CHANNELS: [&str; 19] = [
    "Fp1", "Fp2", "F7", "F3", "Fz", "F4", "F8", "T3", "C3", "Cz", "C4", "T4", "T5", "P3", "Pz", "P4", "T6", "O1", "O2",
];

fn vocab(planted: &[(&str, bool)], total: usize, prefix: &str) -> Vec<DxCode> {
    let mut out: Vec<DxCode> = planted
        .iter()
        .map(|&(name, chronic)| DxCode {
            name: name.to_string(),
            chronic,
        })
        .collect();
    let mut i = 0;
    while out.len() < total {
        out.push(DxCode {
            name: format!("{prefix}_{i:03}"),
            chronic: i % 3 != 0,
        });
        i += 1;
    }
    out
}

fn med_vocab(planted: &[&str], total: usize) -> Vec<String> {
    let mut out = strings(planted);
    let mut i = 0;
    while out.len() < total {
        out.push(format!("med_{i:03}"));
        i += 1;
    }
    out
}

fn desk_phenotypes() -> Vec<PhenotypeSpec> {
    let all = &DESK_CHANNELS;
    vec![
        PhenotypeSpec {
            name: "generalized_slowing".into(),
            spectral_effects: vec![effect([1.0, 4.0], all, 6.0)],
            diagnoses: strings(&["encephalopathy"]),
            medications: vec![],
            report_phrases: strings(&["generalized slowing"]),
            history: false,
            prevalence: 0.25,
        },
        PhenotypeSpec {
            name: "left_focal_slowing".into(),
            spectral_effects: vec![effect([4.0, 8.0], &["F3", "C3", "T3"], 7.0)],
            diagnoses: strings(&["left_hemisphere_lesion"]),
            medications: vec![],
            report_phrases: strings(&["focal slowing over the left hemisphere"]),
            history: false,
            prevalence: 0.2,
        },
        PhenotypeSpec {
            name: "diffuse_beta".into(),
            spectral_effects: vec![effect([12.0, 16.0], all, 8.0)],
            diagnoses: vec![],
            medications: strings(&["benzodiazepine"]),
            report_phrases: strings(&["diffuse beta activity"]),
            history: false,
            prevalence: 0.2,
        },
        PhenotypeSpec {
            name: "hypertension".into(),
            spectral_effects: vec![effect([5.0, 7.0], &["F4", "C4", "T4"], 2.0)],
            diagnoses: strings(&["hypertension"]),
            medications: vec![],
            report_phrases: strings(&["hypertension"]),
            history: true,
            prevalence: 0.3,
        },
        PhenotypeSpec {
            name: "sertraline".into(),
            spectral_effects: vec![effect([10.0, 12.0], &["F3", "F4"], 2.0)],
            diagnoses: vec![],
            medications: strings(&["sertraline"]),
            report_phrases: strings(&["sertraline"]),
            history: true,
            prevalence: 0.3,
        },
        PhenotypeSpec {
            name: "diabetes".into(),
            spectral_effects: vec![effect([0.5, 1.5], &["O1", "O2"], 2.0)],
            diagnoses: strings(&["diabetes_mellitus"]),
            medications: vec![],
            report_phrases: strings(&["diabetes mellitus"]),
            history: true,
            prevalence: 0.3,
        },
    ]
}

impl Profile {
    pub fn named(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper-small" => Ok(Self::paper(name, 4, 512, 8)),
            "paper-base" => Ok(Self::paper(name, 12, 512, 8)),
            "paper-large" => Ok(Self::paper(name, 20, 768, 12)),
            other => config(format!("unknown profile {other:?}; expected one of {PROFILE_NAMES:?}")),
        }
    }

    pub fn desk() -> Self {
        let planted_dx = [
            ("encephalopathy", false),
            ("left_hemisphere_lesion", true),
            ("hypertension", true),
            ("diabetes_mellitus", true),
        ];
        Self {
            name: "desk".into(),
            seed: 7,
            cohort: CohortConfig {
                patients: 400,
                channels: strings(&DESK_CHANNELS),
                duration_s: 320.0,
                sample_rate: 200.0,
                report_fraction: 0.593,
                multi_session_fraction: 0.1,
                sites: 2,
                age_range: [20, 79],
                noise_slope: -2.0,
                noise_knee_hz: 0.5,
                noise_level: 200.0,
                alpha_snr_db: 12.0,
                alpha_width_hz: 0.6,
                alpha_hz_at_20: 11.0,
                alpha_hz_per_year: -0.04,
                alpha_channels: strings(&["O1", "O2"]),
                sex_beta_db: 1.5,
                gain_jitter_db: 1.5,
                line_noise_uv: 5.0,
                channel_missing_prob: 0.03,
                diagnoses: vocab(&planted_dx, 24, "dx"),
                medications: med_vocab(&["benzodiazepine", "sertraline"], 24),
                background_dx_mean: 1.5,
                background_med_mean: 1.5,
                distractor_prob: 0.15,
                boilerplate_sentences: 4,
                phenotypes: desk_phenotypes(),
            },
            dsp: DspConfig {
                band_top_hz: 16.0,
                ..DspConfig::paper()
            },
            tokenizer: TokenizerConfig {
                codebook_size: 64,
                latent_dim: 32,
                level_channels: vec![16, 24, 32, 48, 48],
                disc_channels: vec![16, 32],
                disc_start: 120,
                adv_factor: 0.1,
                lr: 1e-3,
                batch: 8,
                steps: 200,
                window_frames: 64,
                mask_ramp_steps: 100,
                psg_subset: strings(&["F4", "C4", "O2"]),
                dead_code_steps: 40,
                ..TokenizerConfig::paper()
            },
            mim: MimConfig {
                dim: 64,
                depth: 2,
                heads: 4,
                dropout: 0.0,
                dec_depth: 1,
                dec_dim: 64,
                dec_heads: 4,
                window_frames: 64,
                ema_decay: 0.99,
                batch: 32,
                steps: 300,
                warmup_steps: 20,
                ..MimConfig::paper(4, 512, 8)
            },
            align: AlignConfig {
                proj_dim: 64,
                text_max_len: 48,
                refiner_depth: 2,
                refiner_heads: 4,
                ehr_depth: 2,
                ehr_heads: 4,
                n_conditions: 24,
                n_medications: 24,
                condition_slots: 8,
                medication_slots: 8,
                ema_decay: 0.99,
                batch: 64,
                steps: 500,
                ..AlignConfig::paper()
            },
            summarize: SummarizeConfig::paper(),
            bench: BenchConfig {
                min_positives: 3,
                probe_lr: 1e-3,
                probe_epochs: 40,
                probe_batch: 32,
                window_s: 40.0,
                stride_s: 40.0,
                ..BenchConfig::paper()
            },
        }
    }

    fn paper(name: &str, depth: usize, dim: usize, heads: usize) -> Self {
        let planted_dx = [
            ("encephalopathy", false),
            ("left_hemisphere_lesion", true),
            ("hypertension", true),
            ("diabetes_mellitus", true),
        ];
        let mut phenotypes = desk_phenotypes();
        phenotypes[0].spectral_effects[0].channels = strings(&FULL_CHANNELS);
        phenotypes[1].spectral_effects[0].channels = strings(&["F7", "F3", "T3", "C3", "T5", "P3"]);
        phenotypes[2].spectral_effects[0] = effect([13.0, 30.0], &FULL_CHANNELS, 8.0);
        phenotypes[3].spectral_effects[0].channels = strings(&["F8", "F4", "T4", "C4"]);
        phenotypes[4].spectral_effects[0].channels = strings(&["Fp1", "Fp2", "F3", "F4", "Fz"]);
        phenotypes[5].spectral_effects[0].channels = strings(&["O1", "O2", "P3", "P4", "Pz"]);
        Self {
            name: name.into(),
            seed: 7,
            cohort: CohortConfig {
                patients: 2000,
                channels: strings(&FULL_CHANNELS),
                duration_s: 1280.0,
                sample_rate: 200.0,
                report_fraction: 0.593,
                multi_session_fraction: 0.1,
                sites: 3,
                age_range: [0, 99],
                noise_slope: -2.0,
                noise_knee_hz: 0.5,
                noise_level: 200.0,
                alpha_snr_db: 12.0,
                alpha_width_hz: 0.6,
                alpha_hz_at_20: 11.0,
                alpha_hz_per_year: -0.04,
                alpha_channels: strings(&["O1", "O2", "P3", "P4", "Pz"]),
                sex_beta_db: 1.5,
                gain_jitter_db: 1.5,
                line_noise_uv: 5.0,
                channel_missing_prob: 0.03,
                diagnoses: vocab(&planted_dx, 178, "dx"),
                medications: med_vocab(&["benzodiazepine", "sertraline"], 205),
                background_dx_mean: 3.0,
                background_med_mean: 3.0,
                distractor_prob: 0.15,
                boilerplate_sentences: 8,
                phenotypes,
            },
            dsp: DspConfig::paper(),
            tokenizer: TokenizerConfig::paper(),
            mim: MimConfig::paper(depth, dim, heads),
            align: AlignConfig {
                proj_dim: dim,
                ..AlignConfig::paper()
            },
            summarize: SummarizeConfig::paper(),
            bench: BenchConfig::paper(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let p: Profile = toml::from_str(text).map_err(|e| CoreError::Config(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    /// Reads a profile file. A file holding only `base = "<name>"` plus
    /// overriding tables is merged onto that built-in profile.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let value: toml::Value = toml::from_str(&text).map_err(|e| CoreError::Config(format!("{}: {e}", path.display())))?;
        match value.get("base").and_then(|b| b.as_str()) {
            Some(base) => {
                let mut merged = serde_json::to_value(Self::named(base)?).expect("profile serializes");
                let mut overlay = serde_json::to_value(&value).map_err(|e| CoreError::Config(e.to_string()))?;
                overlay.as_object_mut().map(|o| o.remove("base"));
                merge(&mut merged, overlay);
                Self::from_json(merged)
            }
            None => Self::from_toml_str(&text),
        }
    }

    fn from_json(v: serde_json::Value) -> Result<Self> {
        let p: Profile = serde_json::from_value(v).map_err(|e| CoreError::Config(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("profile serializes")
    }

    /// Applies `CLEF_<SECTION>__<FIELD>=value` overrides. Values are parsed as
    /// JSON when possible and used as strings otherwise.
    pub fn with_env_overrides<I, K, V>(self, vars: I) -> Result<Self>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut root = serde_json::to_value(&self).expect("profile serializes");
        let mut touched = false;
        for (k, v) in vars {
            let Some(path) = k.as_ref().strip_prefix("CLEF_") else { continue };
            if path == "PROFILE" || path == "LOG" {
                continue;
            }
            let keys: Vec<String> = path.split("__").map(|s| s.to_ascii_lowercase()).collect();
            let raw = v.as_ref();
            let parsed = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            let mut slot = &mut root;
            for key in &keys {
                slot = match slot.get_mut(key.as_str()) {
                    Some(s) => s,
                    None => return config(format!("override {}: no field {key:?}", k.as_ref())),
                };
            }
            *slot = parsed;
            touched = true;
        }
        if !touched {
            return Ok(self);
        }
        Self::from_json(root)
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.cohort;
        if c.patients == 0 {
            return config("cohort.patients must be positive");
        }
        if c.phenotypes.is_empty() {
            return config("cohort.phenotypes is empty");
        }
        if c.channels.is_empty() {
            return config("cohort.channels is empty");
        }
        if (c.sample_rate - self.dsp.sample_rate).abs() > 0.0 {
            return config("cohort.sample_rate and dsp.sample_rate differ");
        }
        for p in &c.phenotypes {
            p.validate(&c.channels, c.sample_rate / 2.0)?;
            for d in &p.diagnoses {
                if !c.diagnoses.iter().any(|x| &x.name == d) {
                    return config(format!("phenotype {}: diagnosis {d:?} not in vocabulary", p.name));
                }
            }
            for m in &p.medications {
                if !c.medications.contains(m) {
                    return config(format!("phenotype {}: medication {m:?} not in vocabulary", p.name));
                }
            }
        }
        let t = &self.tokenizer;
        if t.level_channels.len() != 5 || t.level_strides.len() != 5 {
            return config("tokenizer needs five levels");
        }
        if t.codebook_size < 2 || t.codebook_size > u16::MAX as usize + 1 {
            return config("tokenizer.codebook_size must be in [2, 65536]");
        }
        for p in [t.p_psg, t.p_drop] {
            if !(0.0..=1.0).contains(&p) {
                return config("mask probabilities must be in [0,1]");
            }
        }
        if t.mask_ramp_steps == 0 {
            return config("tokenizer.mask_ramp_steps must be at least 1");
        }
        for ch in &t.psg_subset {
            if !c.channels.contains(ch) {
                return config(format!("psg channel {ch:?} not in montage"));
            }
        }
        let (fh, fw) = self.downsample();
        let h = self.dsp.bins();
        if h % fh != 0 || t.window_frames % fw != 0 {
            return config(format!("spectrogram {h}x{} not divisible by downsampling {fh}x{fw}", t.window_frames));
        }
        let m = &self.mim;
        if m.dim % m.heads != 0 || m.dec_dim % m.dec_heads != 0 {
            return config("mim width must be divisible by heads");
        }
        if m.patch_h != fh || m.patch_w != fw {
            return config(format!("mim patch {}x{} must equal tokenizer downsampling {fh}x{fw}", m.patch_h, m.patch_w));
        }
        if m.window_frames % fw != 0 {
            return config("mim.window_frames must be a multiple of the time downsampling");
        }
        let [lo, hi] = m.mask_bounds;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return config("mim.mask_bounds must satisfy 0 < lo <= hi <= 1");
        }
        let a = &self.align;
        if a.n_conditions != c.diagnoses.len() || a.n_medications != c.medications.len() {
            return config("align vocabulary sizes must match the cohort vocabularies");
        }
        if a.proj_dim % a.refiner_heads != 0 || a.proj_dim % a.ehr_heads != 0 {
            return config("align.proj_dim must be divisible by heads");
        }
        if a.tau <= 0.0 {
            return config("align.tau must be positive");
        }
        let b = &self.bench;
        if (b.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 || b.split.iter().any(|&r| r < 0.0) {
            return config("bench.split must be non-negative and sum to 1");
        }
        if b.window_s <= 0.0 || b.stride_s <= 0.0 {
            return config("bench window and stride must be positive");
        }
        for ch in &b.channel_subset {
            if !c.channels.contains(ch) {
                return config(format!("bench channel {ch:?} not in montage"));
            }
        }
        if self.summarize.lengths.is_empty() || self.summarize.prompts.is_empty() {
            return config("summarize needs at least one prompt and one length");
        }
        Ok(())
    }

    /// Total (freq, time) downsampling of the tokenizer.
    pub fn downsample(&self) -> (usize, usize) {
        self.tokenizer
            .level_strides
            .iter()
            .fold((1, 1), |(a, b), s| (a * s[0], b * s[1]))
    }

    /// Token grid of one model window.
    pub fn token_grid(&self) -> (usize, usize) {
        let (fh, fw) = self.downsample();
        (self.dsp.bins() / fh, self.mim.window_frames / fw)
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.cohort.channels.iter().position(|c| c == name)
    }

    pub fn psg_indices(&self) -> Vec<usize> {
        self.tokenizer
            .psg_subset
            .iter()
            .filter_map(|n| self.channel_index(n))
            .collect()
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("profile serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn merge(base: &mut serde_json::Value, overlay: serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl DspConfig {
    fn paper() -> Self {
        Self {
            sample_rate: 200.0,
            band_lo_hz: 0.1,
            band_hi_hz: 75.0,
            filter_order: 4,
            notch_base_hz: 60.0,
            notch_q: 30.0,
            notch_nyquist_guard_hz: 2.0,
            window: 800,
            stride: 125,
            nw: 2.0,
            k_max: 4,
            retain_threshold: 0.9,
            freq_res_hz: 0.25,
            band_top_hz: 32.0,
            db_floor: -40.0,
            db_ceil: 40.0,
            log_eps: 1e-12,
            pad_left: 337,
            pad_right: 338,
        }
    }

    /// Frequency rows H.
    pub fn bins(&self) -> usize {
        (self.band_top_hz / self.freq_res_hz).round() as usize
    }

    /// Frame count W for a session of `samples` samples.
    pub fn frames(&self, samples: usize) -> usize {
        let padded = samples + self.pad_left + self.pad_right;
        if padded < self.window {
            0
        } else {
            (padded - self.window) / self.stride + 1
        }
    }
}

impl TokenizerConfig {
    fn paper() -> Self {
        Self {
            codebook_size: 4096,
            latent_dim: 32,
            level_channels: vec![64, 128, 128, 256, 256],
            level_strides: vec![[2, 2], [2, 2], [2, 2], [2, 1], [1, 1]],
            disc_channels: vec![64, 128],
            gamma_diff: 4.0,
            lambda_code: 0.8,
            lambda_commit: 0.2,
            adv_weight_max: 1e4,
            adv_eps: 1e-6,
            adv_factor: 1.0,
            disc_start: 10_000,
            lr: 1.44e-4,
            beta1: 0.0,
            beta2: 0.99,
            batch: 32,
            steps: 200_000,
            window_frames: 2048,
            p_psg: 0.3,
            p_drop: 0.1,
            mask_ramp_steps: 100_000,
            psg_subset: strings(&["F4", "C4", "O2"]),
            dead_code_steps: 2000,
        }
    }
}

impl MimConfig {
    fn paper(depth: usize, dim: usize, heads: usize) -> Self {
        Self {
            dim,
            depth,
            heads,
            mlp_ratio: 4,
            dropout: 0.1,
            dec_depth: 4,
            dec_dim: 512,
            dec_heads: 8,
            patch_h: 16,
            patch_w: 8,
            window_frames: 2048,
            mask_mu: 0.55,
            mask_sigma: 0.15,
            mask_bounds: [0.25, 1.0],
            r_drop: 0.25,
            label_smoothing: 0.1,
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.1,
            ema_decay: 0.999,
            batch: 128,
            epochs: 10,
            steps: 0,
            warmup_steps: 0,
            proxy_in_pool: false,
            grad_clip: 1.0,
        }
    }
}

impl AlignConfig {
    fn paper() -> Self {
        Self {
            proj_dim: 512,
            text_dim: 768,
            text_max_len: 256,
            text_ngram: 3,
            text_seed: 0x5eed,
            refiner_depth: 4,
            refiner_heads: 8,
            ehr_depth: 4,
            ehr_heads: 8,
            age_bins: 11,
            sex_categories: 3,
            race_categories: 8,
            n_conditions: 178,
            n_medications: 205,
            condition_slots: 30,
            medication_slots: 50,
            dedup_codes: true,
            tau: 0.07,
            use_report: true,
            use_ehr: true,
            r_drop: 0.25,
            channel_masking: true,
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.1,
            ema_decay: 0.9999,
            batch: 128,
            epochs: 20,
            warmup_epochs: 1,
            steps: 0,
            grad_clip: 1.0,
            holdout: vec![],
        }
    }
}

impl SummarizeConfig {
    fn paper() -> Self {
        Self {
            lengths: vec![128, 256, 512],
            prompts: strings(&["findings-first", "impression-only", "verbatim"]),
            retries: 2,
            timeout_ms: 30_000,
            prompt: "findings-first".into(),
            length: 256,
        }
    }
}

impl BenchConfig {
    fn paper() -> Self {
        Self {
            split: [0.8, 0.1, 0.1],
            split_seed: 11,
            controls_per_case: 10,
            min_positives: 15,
            non_chronic_days: 7,
            inpatient_days: 1,
            min_encounters: 2,
            probe_hidden: 1536,
            probe_lr: 1e-4,
            probe_weight_decay: 0.01,
            probe_epochs: 5,
            probe_batch: 64,
            standardize: true,
            seeds: 4,
            window_s: 1280.0,
            stride_s: 1280.0,
            max_duration_s: 0.0,
            channel_subset: vec![],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_profiles_validate() {
        for name in PROFILE_NAMES {
            Profile::named(name).unwrap().validate().unwrap();
        }
        assert!(Profile::named("tiny").is_err());
    }

    #[test]
    fn desk_geometry() {
        let p = Profile::desk();
        assert_eq!(p.dsp.bins(), 64);
        assert_eq!(p.token_grid(), (4, 8));
        assert_eq!(p.dsp.frames(64_000), 512);
        let q = Profile::named("paper-base").unwrap();
        assert_eq!(q.dsp.bins(), 128);
        assert_eq!(q.token_grid(), (8, 256));
        assert_eq!(q.dsp.frames(256_000), 2048);
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let p = Profile::desk();
        let text = p.to_toml();
        assert_eq!(Profile::from_toml_str(&text).unwrap(), p);
        let bad = text.replacen("[mim]\n", "[mim]\nbogus = 1\n", 1);
        let err = Profile::from_toml_str(&bad).unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
    }

    #[test]
    fn env_overrides() {
        let p = Profile::desk()
            .with_env_overrides([("CLEF_MIM__STEPS", "12"), ("CLEF_SUMMARIZE__PROMPT", "verbatim"), ("HOME", "/x")])
            .unwrap();
        assert_eq!(p.mim.steps, 12);
        assert_eq!(p.summarize.prompt, "verbatim");
        assert!(Profile::desk().with_env_overrides([("CLEF_MIM__NOPE", "1")]).is_err());
        assert!(Profile::desk().with_env_overrides([("CLEF_MIM__STEPS", "\"x\"")]).is_err());
    }

    #[test]
    fn base_file_merges() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.toml");
        std::fs::write(&path, "base = \"desk\"\n[tokenizer]\nsteps = 5\n").unwrap();
        let p = Profile::load(&path).unwrap();
        assert_eq!(p.tokenizer.steps, 5);
        assert_eq!(p.mim, Profile::desk().mim);
    }

    #[test]
    fn hash_tracks_content() {
        let a = Profile::desk();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
    }
}
