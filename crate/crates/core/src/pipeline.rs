//! Stage wiring shared by the command line and the end-to-end checks.

use std::collections::{BTreeMap, BTreeSet};

use crate::align::{build_samples, concept_holdout_filter, AlignSample, HashedNgramProvider, HoldoutTerms};
use crate::bench::{audit_table, build_table, patient_split, rules_from, CohortTable, SessionEmbedder, Split, TaskSpec};
use crate::cohortgen::Cohort;
use crate::dsp::{Spectrogram, SpectrogramEngine};
use crate::error::{config, data, CoreError, Result};
use crate::mim::MimEncoder;
use crate::nn::Store;
use crate::summarize::LlmClient;
use crate::vqtok::{TokenCache, Tokenizer};
use crate::Profile;

fn workers(n: usize) -> usize {
    std::thread::available_parallelism().map_or(1, |p| p.get()).min(n.max(1))
}

/// Runs `f` over `items` on scoped threads, keeping input order.
fn par_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> Result<U> + Sync) -> Result<Vec<U>> {
    let chunk = items.len().div_ceil(workers(items.len())).max(1);
    std::thread::scope(|s| {
        let f = &f;
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(f).collect::<Result<Vec<U>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

/// Spectrograms of every session, indexed by session id.
pub fn spectrograms(profile: &Profile, cohort: &Cohort) -> Result<Vec<Spectrogram>> {
    for (i, s) in cohort.sessions.iter().enumerate() {
        if s.session_id as usize != i {
            return data(format!("session ids are not dense: position {i} holds {}", s.session_id));
        }
    }
    let engine = SpectrogramEngine::new(&profile.dsp)?;
    par_map(&cohort.sessions, |m| engine.process(&cohort.synthesize(m)))
}

pub fn tokenize_all(tok: &Tokenizer, specs: &[Spectrogram]) -> Result<Vec<TokenCache>> {
    par_map(specs, |s| tok.tokenize(s))
}

/// Tokens computed from a channel subset, for robustness probing.
pub fn tokenize_subset(tok: &Tokenizer, specs: &[Spectrogram], keep: &[bool]) -> Result<Vec<TokenCache>> {
    par_map(specs, |s| tok.tokenize_with(s, keep))
}

pub fn splits(profile: &Profile, cohort: &Cohort) -> BTreeMap<u32, Split> {
    let ids: Vec<u32> = cohort.patients.iter().map(|p| p.patient_id).collect();
    patient_split(&ids, profile.bench.split, profile.bench.split_seed)
}

/// Session ids whose patient falls in one of `which`.
pub fn sessions_in(cohort: &Cohort, split: &BTreeMap<u32, Split>, which: &[Split]) -> Vec<u32> {
    cohort
        .sessions
        .iter()
        .filter(|s| split.get(&s.patient_id).is_some_and(|x| which.contains(x)))
        .map(|s| s.session_id)
        .collect()
}

/// Summaries of every available report under the configured prompt and length.
pub fn alignment_texts(profile: &Profile, cohort: &Cohort, client: &dyn LlmClient) -> Result<BTreeMap<u32, String>> {
    let cfg = &profile.summarize;
    let mut out = BTreeMap::new();
    for s in &cohort.sessions {
        if let Some(r) = &s.report {
            let mut last = None;
            for _ in 0..=cfg.retries {
                match client.summarize(r, &cfg.prompt, cfg.length) {
                    Ok(t) => {
                        last = Some(t);
                        break;
                    }
                    Err(e) => log::warn!("summary of session {} failed: {e}", s.session_id),
                }
            }
            if let Some(t) = last {
                out.insert(s.session_id, t);
            }
        }
    }
    Ok(out)
}

/// Held-out terms named by `profile.align.holdout`.
pub fn holdout_terms(profile: &Profile, tasks: &[TaskSpec]) -> Result<HoldoutTerms> {
    concept_holdout_filter(tasks, &profile.align.holdout, &profile.cohort)
}

/// Stage II samples whose `index` is the session id, so they address the
/// full spectrogram and cache lists.
pub fn alignment_samples(
    profile: &Profile,
    cohort: &Cohort,
    sessions: &[u32],
    texts: &BTreeMap<u32, String>,
    holdout: &HoldoutTerms,
) -> Result<Vec<AlignSample>> {
    let provider = HashedNgramProvider::from_config(&profile.align);
    let lookup = |s: &crate::cohortgen::SessionMeta| texts.get(&s.session_id).cloned();
    let mut samples = build_samples(cohort, sessions, &lookup, &provider, holdout, &rules_from(&profile.bench), &profile.align)?;
    for s in &mut samples {
        s.index = sessions[s.index] as usize;
    }
    Ok(samples)
}

/// Audited case-control tables, one per task.
pub fn task_tables(profile: &Profile, cohort: &Cohort, tasks: &[TaskSpec], split: &BTreeMap<u32, Split>) -> Result<Vec<(TaskSpec, CohortTable)>> {
    let rules = rules_from(&profile.bench);
    tasks
        .iter()
        .map(|t| {
            let table = build_table(t, cohort, &rules, split, &profile.bench);
            audit_table(&table, cohort, split)?;
            Ok((t.clone(), table))
        })
        .collect()
}

/// Embeddings of every session named in `tables`, through the shared
/// windowing path. A configured channel subset needs the tokenizer to
/// recompute tokens without the dropped channels.
pub fn table_embeddings(
    profile: &Profile,
    enc: &MimEncoder,
    store: &Store,
    tok: Option<&Tokenizer>,
    specs: &[Spectrogram],
    caches: &[TokenCache],
    tables: &[(TaskSpec, CohortTable)],
) -> Result<BTreeMap<u32, Vec<f32>>> {
    let wanted: BTreeSet<u32> = tables.iter().flat_map(|(_, t)| t.rows.iter().map(|r| r.session_id)).collect();
    let idx: Vec<usize> = wanted.iter().map(|&s| s as usize).collect();
    if let Some(&bad) = idx.iter().find(|&&i| i >= specs.len() || i >= caches.len()) {
        return data(format!("session {bad} has no spectrogram or token cache"));
    }
    let sub_specs: Vec<Spectrogram> = idx.iter().map(|&i| specs[i].clone()).collect();
    let embedder = SessionEmbedder::new(enc, store, profile)?;
    let sub_caches: Vec<TokenCache> = match (embedder.channel_keep(), tok) {
        (None, _) => idx.iter().map(|&i| caches[i].clone()).collect(),
        (Some(keep), Some(tok)) => tokenize_subset(tok, &sub_specs, keep)?,
        (Some(_), None) => return config("a channel subset needs the tokenizer checkpoint"),
    };
    let emb = embedder.embed_all(&sub_specs, &sub_caches)?;
    if emb.iter().flatten().any(|v| !v.is_finite()) {
        return Err(CoreError::Numeric("non-finite session embedding".into()));
    }
    Ok(wanted.into_iter().zip(emb).collect())
}
