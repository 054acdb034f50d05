use std::fs;
use std::path::Path;
use std::process::{Command, Output};

/// Desk profile shrunk so every stage runs in seconds.
const SMALL: &[(&str, &str)] = &[
    ("CLEF_COHORT__PATIENTS", "40"),
    ("CLEF_COHORT__DURATION_S", "120"),
    ("CLEF_TOKENIZER__STEPS", "3"),
    ("CLEF_MIM__STEPS", "3"),
    ("CLEF_MIM__WARMUP_STEPS", "1"),
    ("CLEF_ALIGN__STEPS", "3"),
    ("CLEF_ALIGN__BATCH", "8"),
    ("CLEF_BENCH__PROBE_EPOCHS", "2"),
    ("CLEF_BENCH__MIN_POSITIVES", "1"),
];

fn clef(args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_clef"));
    cmd.args(args).env_remove("CLEF_PROFILE");
    for (k, v) in SMALL {
        cmd.env(k, v);
    }
    cmd.output().expect("clef runs")
}

fn ok(args: &[&str]) -> Output {
    let out = clef(args);
    assert!(out.status.success(), "clef {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn missing_input_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere.raw");
    let out = clef(&["dsp", "--in", p(&missing), "--out", p(&dir.path().join("x.spec"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains(p(&missing)));
}

#[test]
fn train_align_needs_init() {
    let dir = tempfile::tempdir().unwrap();
    let d = p(dir.path());
    let out = clef(&["train-align", "--cohort", d, "--specs", d, "--tokens", d, "--out", d]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--init"));
}

#[test]
fn unknown_client_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("a.txt"), "FINDINGS: There is diffuse beta activity.").unwrap();
    let out = clef(&["select-prompt", "--corpus", p(dir.path()), "--client", "pigeon", "--out", p(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_override_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_clef"))
        .args(["gen-cohort", "--out", p(dir.path())])
        .env("CLEF_MIM__NO_SUCH_FIELD", "1")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn report_prints_mean_and_sd() {
    let dir = tempfile::tempdir().unwrap();
    let header = "model\ttask\taxis\tseed\tauroc\tbacc\tn_train\tn_test\tskipped";
    let rows = ["m\tt\tdisease\t0\t0.8\t0.7\t10\t5\t", "m\tt\tdisease\t1\t0.6\t0.5\t10\t5\t"];
    fs::write(dir.path().join("results.tsv"), format!("{header}\n{}\n", rows.join("\n"))).unwrap();
    let out = ok(&["report", "--run", p(dir.path())]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().any(|l| l.starts_with("m\ttask\tt\t") && l.contains("0.7000±0.1414")), "{text}");
}

#[test]
fn small_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let at = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    let (cohort, specs, tokens) = (at("cohort"), at("specs"), at("tokens"));
    let (tok_ckpt, mim_ckpt, run) = (at("tok/tokenizer.ckpt"), at("mim/mim.ckpt"), at("run"));
    ok(&["gen-cohort", "--out", &cohort]);
    for f in ["cohort.json", "demographics.tsv", "ehr.tsv", "tasks.toml", "manifest.json"] {
        assert!(Path::new(&cohort).join(f).exists(), "{f}");
    }
    ok(&["dsp", "--in", &at("cohort/sessions"), "--out", &specs]);
    ok(&["train-tokenizer", "--specs", &specs, "--cohort", &cohort, "--out", &at("tok")]);
    ok(&["tokenize", "--ckpt", &tok_ckpt, "--specs", &specs, "--out", &tokens]);
    ok(&["train-mim", "--tokens", &tokens, "--specs", &specs, "--cohort", &cohort, "--out", &at("mim")]);
    let common = ["--cohort", &cohort, "--specs", &specs, "--tokens", &tokens];
    let align_dir = at("align");
    let mut args = vec!["train-align", "--init", &mim_ckpt, "--holdout", "hypertension", "--out", &align_dir];
    args.extend(common);
    ok(&args);
    assert_eq!(fs::read_to_string(Path::new(&align_dir).join("holdout.txt")).unwrap().trim(), "hypertension");
    let (tasks, align_ckpt) = (at("cohort/tasks.toml"), at("align/align.ckpt"));
    let mut args = vec!["probe", "--ckpt", &mim_ckpt, "--ckpt", &align_ckpt, "--tasks", &tasks, "--seeds", "1", "--out", &run];
    args.extend(common);
    ok(&args);
    for f in ["results.tsv", "summary.tsv", "plot_data.tsv"] {
        assert!(Path::new(&run).join(f).exists(), "{f}");
    }
    let out = ok(&["report", "--run", &run]);
    assert!(String::from_utf8_lossy(&out.stdout).contains('±'));

    // a cache built with another codebook blocks re-tokenizing into its directory
    let victim = fs::read_dir(&tokens)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|f| f.extension().is_some_and(|x| x == "tok"))
        .unwrap();
    let mut bytes = fs::read(&victim).unwrap();
    for b in &mut bytes[32..64] {
        *b ^= 0xff;
    }
    fs::write(&victim, bytes).unwrap();
    let out = clef(&["tokenize", "--ckpt", &tok_ckpt, "--specs", &specs, "--out", &tokens]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("codebook"));
}
