use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use clef_core::align::{self, AlignData, AlignLog, AlignTrainer, HoldoutTerms};
use clef_core::bench::{self, Split, TaskSpec};
use clef_core::cohortgen::{generate_cohort, load_waveform, save_waveform, Cohort};
use clef_core::dsp::{load_spectrogram, save_spectrogram, Spectrogram, SpectrogramEngine};
use clef_core::manifest::{file_hash, RunManifest};
use clef_core::mim::{self, Corpus, MimDims, MimLog, WindowSource};
use clef_core::summarize::{self, LlmClient, MockClient, SocketClient};
use clef_core::vqtok::{self, TokLosses, TokenCache, Tokenizer};
use clef_core::{pipeline, CoreError, Profile};
use clef_grad::Checkpoint;

#[derive(Parser)]
#[command(name = "clef", version, about = "Synthetic clinical EEG pipeline: cohort, spectrograms, tokenizer, masked modeling, alignment, probing")]
struct Cli {
    /// Profile name (desk, paper-small, paper-base, paper-large) or a TOML file.
    /// CLEF_<SECTION>__<FIELD> environment variables override single fields.
    #[arg(long, global = true, default_value = "desk")]
    profile: String,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic cohort: EHR tables, reports, waveforms, task file.
    GenCohort {
        #[arg(long)]
        out: PathBuf,
        /// Root seed; defaults to the profile seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Filter and transform waveform files into spectrogram caches.
    Dsp {
        /// A waveform file or a directory of them.
        #[arg(long = "in")]
        input: PathBuf,
        /// Output file, or directory when the input is a directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the VQ tokenizer on spectrogram caches.
    TrainTokenizer {
        #[arg(long)]
        specs: PathBuf,
        /// Cohort directory; restricts training to train-split patients.
        #[arg(long)]
        cohort: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write token caches for every spectrogram.
    Tokenize {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        specs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage I: masked token modeling.
    TrainMim {
        #[arg(long)]
        tokens: PathBuf,
        #[arg(long)]
        specs: PathBuf,
        /// Cohort directory; restricts training to train-split patients and
        /// reports held-out masked accuracy.
        #[arg(long)]
        cohort: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage II: report and EHR alignment, starting from a Stage I checkpoint.
    TrainAlign {
        /// Stage I checkpoint (required).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Comma-separated task ids, or a file with one id per line.
        #[arg(long)]
        holdout: Option<String>,
        /// Task file used to resolve held-out ids; defaults to the cohort's.
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        specs: PathBuf,
        #[arg(long)]
        tokens: PathBuf,
        /// mock, or socket:<addr> for an external summarizer.
        #[arg(long, default_value = "mock")]
        client: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score prompt and length candidates by QA consistency.
    SelectPrompt {
        /// Cohort directory, or a directory of .txt reports.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "mock")]
        client: String,
        /// Question file (question<TAB>kind); defaults to the built-in set.
        #[arg(long)]
        questions: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Probe frozen encoders on case-control tasks.
    Probe {
        /// Stage I or Stage II checkpoint; repeat to compare encoders.
        #[arg(long, required = true)]
        ckpt: Vec<PathBuf>,
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        specs: PathBuf,
        #[arg(long)]
        tokens: PathBuf,
        /// Tokenizer checkpoint; needed when a channel subset is configured.
        #[arg(long)]
        tokenizer: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print per-task, per-axis and overall aggregates of a probe run.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<CoreError>()) {
        Some(CoreError::Config(_)) => 2,
        Some(CoreError::Numeric(_)) => 4,
        _ => 3,
    }
}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    CoreError::Config(msg.into()).into()
}

fn load_profile(name: &str) -> Result<Profile> {
    let path = Path::new(name);
    let p = if path.extension().is_some_and(|e| e == "toml") || path.is_file() {
        Profile::load(path)?
    } else {
        Profile::named(name)?
    };
    let p = p.with_env_overrides(std::env::vars())?;
    p.validate()?;
    Ok(p)
}

fn run(cli: Cli) -> Result<()> {
    let profile = load_profile(&cli.profile)?;
    match cli.cmd {
        Cmd::GenCohort { out, seed } => gen_cohort(&profile, &out, seed),
        Cmd::Dsp { input, out } => dsp(&profile, &input, &out),
        Cmd::TrainTokenizer { specs, cohort, out } => train_tokenizer(&profile, &specs, cohort.as_deref(), &out),
        Cmd::Tokenize { ckpt, specs, out } => tokenize(&profile, &ckpt, &specs, &out),
        Cmd::TrainMim { tokens, specs, cohort, out } => train_mim(&profile, &tokens, &specs, cohort.as_deref(), &out),
        Cmd::TrainAlign {
            init,
            holdout,
            tasks,
            cohort,
            specs,
            tokens,
            client,
            out,
        } => {
            let init = init.ok_or_else(|| config_err("train-align needs --init <Stage I checkpoint>; alignment only continues a trained masked model"))?;
            train_align(&profile, &init, holdout.as_deref(), tasks.as_deref(), &cohort, &specs, &tokens, &client, &out)
        }
        Cmd::SelectPrompt { corpus, client, questions, out } => select_prompt(&profile, &corpus, &client, questions.as_deref(), &out),
        Cmd::Probe {
            ckpt,
            tasks,
            seeds,
            cohort,
            specs,
            tokens,
            tokenizer,
            out,
        } => probe(&profile, &ckpt, &tasks, seeds, &cohort, &specs, &tokens, tokenizer.as_deref(), &out),
        Cmd::Report { run } => report(&run),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn require(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(CoreError::Data(format!("{}: no such file or directory", path.display())).into());
    }
    Ok(())
}

fn files_with_ext(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    require(dir)?;
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == ext))
        .collect();
    out.sort();
    Ok(out)
}

const COHORT_FILE: &str = "cohort.json";
const TASK_FILE: &str = "tasks.toml";

fn load_cohort(dir: &Path) -> Result<Cohort> {
    let path = dir.join(COHORT_FILE);
    require(&path)?;
    Ok(Cohort::load_json(&path)?)
}

/// Spectrograms of a directory, indexed by session id.
fn load_specs(dir: &Path) -> Result<Vec<Spectrogram>> {
    let mut specs = files_with_ext(dir, "spec")?
        .iter()
        .map(|p| load_spectrogram(p))
        .collect::<clef_core::Result<Vec<_>>>()?;
    specs.sort_by_key(|s| s.session_id);
    dense(specs.iter().map(|s| s.session_id), dir)?;
    Ok(specs)
}

fn load_tokens(dir: &Path) -> Result<Vec<TokenCache>> {
    require(dir)?;
    let mut caches = vqtok::load_token_dir(dir)?;
    caches.sort_by_key(|c| c.session_id);
    dense(caches.iter().map(|c| c.session_id), dir)?;
    Ok(caches)
}

fn dense(ids: impl Iterator<Item = u32>, dir: &Path) -> Result<()> {
    for (i, id) in ids.enumerate() {
        if id as usize != i {
            return Err(CoreError::Data(format!("{}: session {i} is missing", dir.display())).into());
        }
    }
    Ok(())
}

fn spec_name(session: u32) -> String {
    format!("session_{session:06}.spec")
}

fn gen_cohort(profile: &Profile, out: &Path, seed: Option<u64>) -> Result<()> {
    let seed = seed.unwrap_or(profile.seed);
    let cohort = generate_cohort(&profile.cohort, seed)?;
    create_dir(&out.join("sessions"))?;
    create_dir(&out.join("reports"))?;
    cohort.save_json(&out.join(COHORT_FILE))?;
    write(&out.join("demographics.tsv"), &cohort.demographics_table())?;
    write(&out.join("ehr.tsv"), &cohort.ehr_table())?;
    let (dx, med) = cohort.vocab_tables();
    write(&out.join("dx_vocab.tsv"), &dx)?;
    write(&out.join("med_vocab.tsv"), &med)?;
    write(&out.join(TASK_FILE), &bench::tasks_to_toml(&bench::default_tasks(&profile.cohort)))?;
    for (i, s) in cohort.sessions.iter().enumerate() {
        if let Some(r) = &s.report {
            write(&out.join("reports").join(format!("session_{:06}.txt", s.session_id)), r)?;
        }
        let raw = cohort.synthesize(s);
        save_waveform(&out.join("sessions").join(format!("session_{:06}.raw", s.session_id)), &raw)?;
        if (i + 1) % 100 == 0 {
            log::info!("wrote {} of {} sessions", i + 1, cohort.sessions.len());
        }
    }
    let mut m = RunManifest::new("gen-cohort", profile);
    m.seeds.insert("cohort".into(), seed);
    m.finish(out)?;
    log::info!("{} patients, {} sessions in {}", cohort.patients.len(), cohort.sessions.len(), out.display());
    Ok(())
}

fn dsp(profile: &Profile, input: &Path, out: &Path) -> Result<()> {
    require(input)?;
    let engine = SpectrogramEngine::new(&profile.dsp)?;
    let mut m = RunManifest::new("dsp", profile);
    m.input(input)?;
    if input.is_dir() {
        create_dir(out)?;
        let files = files_with_ext(input, "raw")?;
        for (i, f) in files.iter().enumerate() {
            let spec = engine.process(&load_waveform(f)?)?;
            save_spectrogram(&out.join(spec_name(spec.session_id)), &spec)?;
            if (i + 1) % 100 == 0 {
                log::info!("{} of {} sessions", i + 1, files.len());
            }
        }
        m.finish(out)?;
    } else {
        let spec = engine.process(&load_waveform(input)?)?;
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            create_dir(dir)?;
        }
        save_spectrogram(out, &spec)?;
        m.finish_file(out)?;
    }
    Ok(())
}

fn train_split_sessions(profile: &Profile, cohort: &Cohort) -> BTreeSet<u32> {
    let split = pipeline::splits(profile, cohort);
    pipeline::sessions_in(cohort, &split, &[Split::Train]).into_iter().collect()
}

fn train_tokenizer(profile: &Profile, specs_dir: &Path, cohort: Option<&Path>, out: &Path) -> Result<()> {
    let mut specs = load_specs(specs_dir)?;
    let mut m = RunManifest::new("train-tokenizer", profile);
    m.input(specs_dir)?;
    if let Some(dir) = cohort {
        let c = load_cohort(dir)?;
        m.input(&dir.join(COHORT_FILE))?;
        let keep = train_split_sessions(profile, &c);
        specs.retain(|s| keep.contains(&s.session_id));
    }
    create_dir(out)?;
    let mut rows = format!("{}\n", TokLosses::HEADER);
    let (tr, log) = vqtok::train_tokenizer(profile, &specs, |l| {
        if l.step % 20 == 0 {
            log::info!("{}", l.row());
        }
    })?;
    for l in &log {
        rows.push_str(&l.row());
        rows.push('\n');
    }
    write(&out.join("loss.tsv"), &rows)?;
    let ck = tr.tok.checkpoint(Some(&tr.disc), &profile.hash(), &tr.usage);
    ck.save(&out.join("tokenizer.ckpt"))?;
    m.finish(out)?;
    log::info!("codebook {} in use {:.2}", tr.tok.codebook_snapshot().hash(), tr.tok.codebook_snapshot().used_fraction());
    Ok(())
}

fn load_tokenizer(profile: &Profile, path: &Path) -> Result<Tokenizer> {
    require(path)?;
    let ck = Checkpoint::load(path).map_err(CoreError::from)?;
    Ok(Tokenizer::from_checkpoint(profile, &ck)?)
}

fn tokenize(profile: &Profile, ckpt: &Path, specs_dir: &Path, out: &Path) -> Result<()> {
    let tok = load_tokenizer(profile, ckpt)?;
    let hash = tok.codebook_snapshot().hash();
    if out.is_dir() {
        let existing = vqtok::load_token_dir(out)?;
        vqtok::check_cache_hash(&existing, &hash).with_context(|| format!("{} holds caches from another codebook", out.display()))?;
    }
    let specs = load_specs(specs_dir)?;
    create_dir(out)?;
    for t in pipeline::tokenize_all(&tok, &specs)? {
        vqtok::save_tokens(out, &t)?;
    }
    let mut m = RunManifest::new("tokenize", profile);
    m.input(ckpt)?;
    m.input(specs_dir)?;
    m.finish(out)?;
    log::info!("{} caches with codebook {hash}", specs.len());
    Ok(())
}

fn train_mim(profile: &Profile, tokens: &Path, specs_dir: &Path, cohort: Option<&Path>, out: &Path) -> Result<()> {
    let caches = load_tokens(tokens)?;
    let specs = load_specs(specs_dir)?;
    let hash = caches.first().map(|c| c.codebook_hash.clone()).unwrap_or_default();
    vqtok::check_cache_hash(&caches, &hash)?;
    let dims = MimDims::from_profile(profile);
    let mut m = RunManifest::new("train-mim", profile);
    m.input(tokens)?;
    m.input(specs_dir)?;
    let train = match cohort {
        Some(dir) => {
            m.input(&dir.join(COHORT_FILE))?;
            Some(train_split_sessions(profile, &load_cohort(dir)?))
        }
        None => None,
    };
    let in_train = |c: &TokenCache| train.as_ref().is_none_or(|t| t.contains(&c.session_id));
    let corpus = Corpus::new(dims, &specs, &caches)?.filter(in_train);
    create_dir(out)?;
    let (tr, log) = mim::train_mim(&profile.mim, dims, profile.seed, &corpus, |l| {
        if l.step % 25 == 0 {
            log::info!("{}", l.row());
        }
    })?;
    let mut rows = format!("{}\n", MimLog::HEADER);
    for l in &log {
        rows.push_str(&l.row());
        rows.push('\n');
    }
    write(&out.join("loss.tsv"), &rows)?;
    if train.is_some() {
        let held = Corpus::new(dims, &specs, &caches)?.filter(|c| !in_train(c));
        if !held.is_empty() {
            let acc = mim::masked_accuracy(&tr.ema_model(), &held, 200, profile.seed)?;
            log::info!("held-out masked accuracy {acc:.4} (chance {:.4})", 1.0 / dims.k as f64);
            write(&out.join("eval.tsv"), &format!("metric\tvalue\nmasked_accuracy\t{acc:.6}\nchance\t{:.6}\n", 1.0 / dims.k as f64))?;
        }
    }
    tr.model.checkpoint(&tr.ema, &tr.opt, &profile.hash(), &hash).save(&out.join("mim.ckpt"))?;
    m.finish(out)?;
    Ok(())
}

fn client_from(profile: &Profile, spec: &str) -> Result<Box<dyn LlmClient>> {
    match spec.split_once(':') {
        None if spec == "mock" => Ok(Box::new(MockClient::new(&profile.cohort))),
        Some(("socket", addr)) if !addr.is_empty() => Ok(Box::new(SocketClient::new(addr, profile.summarize.timeout_ms))),
        _ => Err(config_err(format!("unknown client {spec:?}; use mock or socket:<addr>"))),
    }
}

fn cohort_tasks(profile: &Profile, cohort_dir: &Path, tasks: Option<&Path>) -> Result<Vec<TaskSpec>> {
    let t = match tasks {
        Some(p) => {
            require(p)?;
            bench::load_tasks(p)?
        }
        None if cohort_dir.join(TASK_FILE).exists() => bench::load_tasks(&cohort_dir.join(TASK_FILE))?,
        None => bench::default_tasks(&profile.cohort),
    };
    bench::validate_tasks(&t, &profile.cohort)?;
    Ok(t)
}

fn holdout_ids(arg: &str) -> Result<Vec<String>> {
    let path = Path::new(arg);
    let text = if path.is_file() {
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?
    } else {
        arg.replace(',', "\n")
    };
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).map(String::from).collect())
}

#[allow(clippy::too_many_arguments)]
fn train_align(
    profile: &Profile,
    init: &Path,
    holdout: Option<&str>,
    tasks: Option<&Path>,
    cohort_dir: &Path,
    specs_dir: &Path,
    tokens: &Path,
    client: &str,
    out: &Path,
) -> Result<()> {
    require(init)?;
    let stage1 = Checkpoint::load(init).map_err(CoreError::from)?;
    if stage1.meta.stage != "mim" {
        return Err(config_err(format!("{} is a {:?} checkpoint; --init needs a Stage I (mim) checkpoint", init.display(), stage1.meta.stage)));
    }
    let mut profile = profile.clone();
    if let Some(h) = holdout {
        profile.align.holdout = holdout_ids(h)?;
    }
    let cohort = load_cohort(cohort_dir)?;
    let specs = load_specs(specs_dir)?;
    let caches = load_tokens(tokens)?;
    if let Some(h) = stage1.meta.notes.get("codebook_hash") {
        vqtok::check_cache_hash(&caches, h)?;
    }
    let task_list = cohort_tasks(&profile, cohort_dir, tasks)?;
    let terms = if profile.align.holdout.is_empty() {
        HoldoutTerms::default()
    } else {
        pipeline::holdout_terms(&profile, &task_list)?
    };
    let client = client_from(&profile, client)?;
    let texts = pipeline::alignment_texts(&profile, &cohort, client.as_ref())?;
    let split = pipeline::splits(&profile, &cohort);
    let train = pipeline::sessions_in(&cohort, &split, &[Split::Train]);
    let samples = pipeline::alignment_samples(&profile, &cohort, &train, &texts, &terms)?;
    let dims = mim::checkpoint_dims(&stage1)?;
    let set = AlignData {
        dims,
        specs: &specs,
        caches: &caches,
        samples,
    };
    create_dir(out)?;
    let mut trainer = AlignTrainer::new(&profile, &stage1, set.samples.len())?;
    let log = trainer.train(&set, |l| {
        if l.step % 25 == 0 {
            log::info!("{}", l.row());
        }
    })?;
    let mut rows = format!("{}\n", AlignLog::HEADER);
    for l in &log {
        rows.push_str(&l.row());
        rows.push('\n');
    }
    write(&out.join("loss.tsv"), &rows)?;
    let model = trainer.ema_model();
    let rest = pipeline::sessions_in(&cohort, &split, &[Split::Val, Split::Test]);
    let held = pipeline::alignment_samples(&profile, &cohort, &rest, &texts, &terms)?;
    if !held.is_empty() {
        let embedder = bench::SessionEmbedder::new(&model.enc, &model.store, &profile)?;
        let u = held
            .iter()
            .map(|s| embedder.embed(&specs[s.index], &caches[s.index]))
            .collect::<clef_core::Result<Vec<_>>>()?;
        let q = model.project_ehr(&u)?;
        let c = model.embed_ehr(&held.iter().map(|s| &s.ehr).collect::<Vec<_>>())?;
        let top1 = align::retrieval_top1(&q, &c, 64, 20, profile.seed);
        let pool = held.len().min(64);
        log::info!("EEG to EHR retrieval top-1 {top1:.4} (chance {:.4})", 1.0 / pool as f64);
        write(&out.join("eval.tsv"), &format!("metric\tvalue\nretrieval_top1\t{top1:.6}\nchance\t{:.6}\n", 1.0 / pool as f64))?;
    }
    if !profile.align.holdout.is_empty() {
        write(&out.join("holdout.txt"), &(profile.align.holdout.join("\n") + "\n"))?;
    }
    trainer.checkpoint(&profile.hash()).save(&out.join("align.ckpt"))?;
    let mut m = RunManifest::new("train-align", &profile);
    for p in [init, cohort_dir, specs_dir, tokens] {
        m.input(p)?;
    }
    m.finish(out)?;
    Ok(())
}

fn corpus_reports(corpus: &Path) -> Result<Vec<String>> {
    require(corpus)?;
    if corpus.join(COHORT_FILE).exists() {
        let c = load_cohort(corpus)?;
        return Ok(c.sessions.iter().filter_map(|s| s.report.clone()).collect());
    }
    let files = if corpus.is_dir() { files_with_ext(corpus, "txt")? } else { vec![corpus.to_path_buf()] };
    files
        .iter()
        .map(|f| fs::read_to_string(f).with_context(|| format!("reading {}", f.display())))
        .collect()
}

fn select_prompt(profile: &Profile, corpus: &Path, client: &str, questions: Option<&Path>, out: &Path) -> Result<()> {
    let reports = corpus_reports(corpus)?;
    if reports.is_empty() {
        return Err(CoreError::Data(format!("{}: no reports", corpus.display())).into());
    }
    let qs = match questions {
        Some(p) => {
            require(p)?;
            summarize::load_questions(p)?
        }
        None => summarize::default_questions(),
    };
    let client = client_from(profile, client)?;
    let cfg = &profile.summarize;
    let cands = summarize::candidates(&cfg.prompts, &cfg.lengths);
    let mut scores = Vec::with_capacity(cands.len());
    for c in &cands {
        let s = summarize::qa_consistency(&reports, &qs, c, client.as_ref(), cfg.retries)?;
        log::info!("{} @ {}: S = {:.4} ({} failed calls)", c.prompt, c.length, s.score, s.failures);
        scores.push(s);
    }
    create_dir(out)?;
    write(&out.join("results.tsv"), &summarize::results_table(&scores, &qs))?;
    write(&out.join("questions.tsv"), &summarize::format_questions(&qs))?;
    let values: Vec<f64> = scores.iter().map(|s| s.score).collect();
    if let Some(best) = summarize::select_candidate(&cands, &values) {
        println!("selected\t{}\t{}", best.prompt, best.length);
        write(&out.join("selected.txt"), &format!("{}\t{}\n", best.prompt, best.length))?;
    }
    let mut m = RunManifest::new("select-prompt", profile);
    m.input(corpus)?;
    m.finish(out)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn probe(
    profile: &Profile,
    ckpts: &[PathBuf],
    tasks_path: &Path,
    seeds: Option<usize>,
    cohort_dir: &Path,
    specs_dir: &Path,
    tokens: &Path,
    tokenizer: Option<&Path>,
    out: &Path,
) -> Result<()> {
    require(tasks_path)?;
    let tasks = bench::load_tasks(tasks_path)?;
    bench::validate_tasks(&tasks, &profile.cohort)?;
    let mut cfg = profile.bench.clone();
    if let Some(s) = seeds {
        cfg.seeds = s;
    }
    let cohort = load_cohort(cohort_dir)?;
    let specs = load_specs(specs_dir)?;
    let caches = load_tokens(tokens)?;
    let tok = tokenizer.map(|p| load_tokenizer(profile, p)).transpose()?;
    let split = pipeline::splits(profile, &cohort);
    let tables = pipeline::task_tables(profile, &cohort, &tasks, &split)?;
    create_dir(&out.join("tables"))?;
    for (t, table) in &tables {
        write(&out.join("tables").join(format!("{}.tsv", t.id)), &table.to_tsv())?;
    }
    let mut m = RunManifest::new("probe", profile);
    m.input(tasks_path)?;
    let mut results = Vec::new();
    let mut names = BTreeMap::new();
    for path in ckpts {
        require(path)?;
        let ck = Checkpoint::load(path).map_err(CoreError::from)?;
        let (enc, store) = align::load_encoder(profile, &ck)?;
        let mut name = path.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned());
        if names.contains_key(&name) {
            name = format!("{name}_{}", names.len());
        }
        names.insert(name.clone(), file_hash(path)?);
        m.input(path)?;
        let emb = pipeline::table_embeddings(profile, &enc, &store, tok.as_ref(), &specs, &caches, &tables)?;
        let rs = bench::benchmark_run(&name, &tables, &emb, &cfg)?;
        for r in &rs {
            match (r.auroc, &r.skipped) {
                (_, Some(why)) if r.seed == 0 => log::warn!("{name} {}: skipped, {why}", r.task),
                (Some(a), None) => log::info!("{name} {} seed {}: AUROC {a:.4}", r.task, r.seed),
                _ => {}
            }
        }
        results.extend(rs);
    }
    write(&out.join("results.tsv"), &bench::results_to_tsv(&results))?;
    let summary = bench::summary_table(&results);
    write(&out.join("summary.tsv"), &summary)?;
    write(&out.join("plot_data.tsv"), &plot_data(&results))?;
    print!("{summary}");
    m.finish(out)?;
    Ok(())
}

/// Per-seed axis means, one row per (model, axis, seed).
fn plot_data(rs: &[bench::TaskResult]) -> String {
    let mut acc: BTreeMap<(String, &'static str, usize), Vec<f64>> = BTreeMap::new();
    for r in rs {
        if let Some(a) = r.auroc {
            acc.entry((r.model.clone(), r.axis.name(), r.seed)).or_default().push(a);
        }
    }
    let mut out = String::from("model\taxis\tseed\tauroc\n");
    for ((m, axis, seed), v) in acc {
        out.push_str(&format!("{m}\t{axis}\t{seed}\t{:.6}\n", v.iter().sum::<f64>() / v.len() as f64));
    }
    out
}

fn report(run: &Path) -> Result<()> {
    let path = run.join("results.tsv");
    require(&path)?;
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let rs = bench::results_from_tsv(&text)?;
    let summary = bench::summary_table(&rs);
    println!("model\tscope\tname\tauroc (mean±sd)\tbacc (mean±sd)\tn");
    for line in summary.lines().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        println!("{}\t{}\t{}\t{}±{}\t{}±{}\t{}", f[0], f[1], f[2], f[3], f[4], f[5], f[6], f[7]);
    }
    Ok(())
}
