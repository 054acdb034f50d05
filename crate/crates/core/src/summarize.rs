//! Summarizer selection by QA consistency: every question is answered on the
//! raw report and on its summary, and candidates (prompt, length) are ranked
//! by mean agreement.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::bench::report_mentions;
use crate::error::{config, io_err, CoreError, Result};
use crate::profile::CohortConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionKind {
    Boolean,
    Integer,
    FreeText,
}

impl QuestionKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "boolean" | "bool" => Ok(Self::Boolean),
            "integer" | "int" => Ok(Self::Integer),
            "free_text" | "free-text" | "text" => Ok(Self::FreeText),
            other => config(format!("unknown question kind {other:?}")),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Boolean => "boolean",
            Self::Integer => "integer",
            Self::FreeText => "free_text",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub text: String,
    pub kind: QuestionKind,
}

impl Question {
    pub fn new(text: &str, kind: QuestionKind) -> Self {
        Self { text: text.into(), kind }
    }
}

/// Summarization prompt and output length.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Candidate {
    pub prompt: String,
    pub length: usize,
}

/// Model access. Summaries are produced without sight of any question.
pub trait LlmClient {
    fn summarize(&self, report: &str, prompt: &str, max_tokens: usize) -> Result<String>;
    fn answer(&self, text: &str, question: &Question) -> Result<String>;
    /// Similarity of two free-text answers in [0, 1].
    fn judge_similarity(&self, a: &str, b: &str) -> Result<f64>;
}

/// Default clinical question set.
pub fn default_questions() -> Vec<Question> {
    use QuestionKind::*;
    [
        ("Is generalized slowing present?", Boolean),
        ("Is focal slowing over the left hemisphere present?", Boolean),
        ("Is diffuse beta activity present?", Boolean),
        ("Does the patient have a history of hypertension?", Boolean),
        ("Does the patient have a history of diabetes mellitus?", Boolean),
        ("Is the patient taking sertraline?", Boolean),
        ("Is the patient taking a benzodiazepine?", Boolean),
        ("Is the study abnormal?", Boolean),
        ("Is the study normal?", Boolean),
        ("Were epileptiform discharges seen?", Boolean),
        ("Was a seizure recorded?", Boolean),
        ("Is there photic driving?", Boolean),
        ("Was hyperventilation performed?", Boolean),
        ("Was photic stimulation performed?", Boolean),
        ("Is there muscle artifact?", Boolean),
        ("Is there eye movement artifact?", Boolean),
        ("What is the frequency of the posterior dominant rhythm in Hz?", Integer),
        ("How old is the patient in years?", Integer),
        ("How many medications are listed?", Integer),
        ("How many abnormal findings are described?", Integer),
        ("What medications is the patient taking?", FreeText),
        ("What is the overall impression?", FreeText),
        ("What is the relevant clinical history?", FreeText),
        ("What abnormal findings are described?", FreeText),
    ]
    .into_iter()
    .map(|(t, k)| Question::new(t, k))
    .collect()
}

/// `question<TAB>kind` per line; blank lines and `#` comments are skipped.
pub fn parse_questions(text: &str) -> Result<Vec<Question>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (q, k) = line
            .rsplit_once('\t')
            .ok_or_else(|| CoreError::Config(format!("question line {}: expected question<TAB>kind", i + 1)))?;
        out.push(Question::new(q.trim(), QuestionKind::parse(k)?));
    }
    if out.is_empty() {
        return config("question set is empty");
    }
    Ok(out)
}

pub fn format_questions(qs: &[Question]) -> String {
    qs.iter().map(|q| format!("{}\t{}\n", q.text, q.kind.name())).collect()
}

pub fn load_questions(path: &Path) -> Result<Vec<Question>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_questions(&text)
}

/// First numeral in `s`, and whether a second one follows.
pub fn first_numeral(s: &str) -> (Option<f64>, bool) {
    let mut nums = Vec::new();
    let mut cur = String::new();
    for c in s.chars().chain(std::iter::once(' ')) {
        if c.is_ascii_digit() || (c == '.' && !cur.is_empty() && !cur.contains('.')) {
            cur.push(c);
        } else if !cur.is_empty() {
            nums.push(cur.trim_end_matches('.').parse::<f64>().ok());
            cur.clear();
        }
    }
    (nums.first().copied().flatten(), nums.len() > 1)
}

fn canonical_bool(s: &str) -> String {
    let w = s.trim().trim_end_matches('.').to_lowercase();
    match w.as_str() {
        "yes" | "y" | "true" | "1" | "present" => "yes".into(),
        "no" | "n" | "false" | "0" | "absent" => "no".into(),
        _ => w,
    }
}

pub fn token_jaccard(a: &str, b: &str) -> f64 {
    use std::collections::BTreeSet;
    let ta: BTreeSet<String> = a.split_whitespace().map(|w| w.to_lowercase()).collect();
    let tb: BTreeSet<String> = b.split_whitespace().map(|w| w.to_lowercase()).collect();
    if ta.is_empty() && tb.is_empty() {
        return 1.0;
    }
    ta.intersection(&tb).count() as f64 / ta.union(&tb).count() as f64
}

/// Agreement of two answers and whether an integer answer held more than
/// one numeral.
pub fn agreement_flagged(a: &str, b: &str, kind: QuestionKind, client: &dyn LlmClient) -> Result<(f64, bool)> {
    Ok(match kind {
        QuestionKind::Boolean => ((canonical_bool(a) == canonical_bool(b)) as u8 as f64, false),
        QuestionKind::Integer => {
            let (x, ma) = first_numeral(a);
            let (y, mb) = first_numeral(b);
            let same = match (x, y) {
                (Some(x), Some(y)) => x == y,
                (None, None) => a.trim().eq_ignore_ascii_case(b.trim()),
                _ => false,
            };
            (same as u8 as f64, ma || mb)
        }
        QuestionKind::FreeText => (client.judge_similarity(a, b)?.clamp(0.0, 1.0), false),
    })
}

pub fn agreement(a: &str, b: &str, kind: QuestionKind, client: &dyn LlmClient) -> Result<f64> {
    Ok(agreement_flagged(a, b, kind, client)?.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct QaScore {
    pub candidate: Candidate,
    /// Mean agreement over every (report, question) pair.
    pub score: f64,
    pub per_question: Vec<f64>,
    /// Client calls that still failed after retries.
    pub failures: usize,
    pub multi_numeral: usize,
}

fn retry<T>(retries: usize, failures: &mut usize, mut f: impl FnMut() -> Result<T>) -> Option<T> {
    for attempt in 0..=retries {
        match f() {
            Ok(v) => return Some(v),
            Err(e) if attempt == retries => {
                log::warn!("client call failed after {} attempts: {e}", retries + 1);
            }
            Err(_) => {}
        }
    }
    *failures += 1;
    None
}

/// QA-consistency score of one candidate. Calls that fail after `retries`
/// count as disagreement.
pub fn qa_consistency(reports: &[String], questions: &[Question], candidate: &Candidate, client: &dyn LlmClient, retries: usize) -> Result<QaScore> {
    if reports.is_empty() || questions.is_empty() {
        return config("QA consistency needs at least one report and one question");
    }
    let mut failures = 0;
    let mut multi = 0;
    let mut per_q = vec![0.0; questions.len()];
    for report in reports {
        let summary = retry(retries, &mut failures, || client.summarize(report, &candidate.prompt, candidate.length));
        for (j, q) in questions.iter().enumerate() {
            let Some(summary) = &summary else { continue };
            let raw = retry(retries, &mut failures, || client.answer(report, q));
            let sum = retry(retries, &mut failures, || client.answer(summary, q));
            if let (Some(a), Some(b)) = (raw, sum) {
                if let Some((s, flag)) = retry(retries, &mut failures, || agreement_flagged(&a, &b, q.kind, client)) {
                    per_q[j] += s;
                    multi += flag as usize;
                }
            }
        }
    }
    let n = reports.len() as f64;
    per_q.iter_mut().for_each(|v| *v /= n);
    let score = per_q.iter().sum::<f64>() / questions.len() as f64;
    Ok(QaScore {
        candidate: candidate.clone(),
        score,
        per_question: per_q,
        failures,
        multi_numeral: multi,
    })
}

/// Highest score; ties go to the lexicographically smallest (prompt, length).
pub fn select_candidate<'a>(candidates: &'a [Candidate], scores: &[f64]) -> Option<&'a Candidate> {
    candidates
        .iter()
        .zip(scores)
        .fold(None, |best: Option<(&Candidate, f64)>, (c, &s)| match best {
            Some((b, bs)) if bs > s || (bs == s && b <= c) => Some((b, bs)),
            _ => Some((c, s)),
        })
        .map(|(c, _)| c)
}

pub fn candidates(prompts: &[String], lengths: &[usize]) -> Vec<Candidate> {
    prompts
        .iter()
        .flat_map(|p| lengths.iter().map(move |&l| Candidate { prompt: p.clone(), length: l }))
        .collect()
}

pub fn results_table(scores: &[QaScore], questions: &[Question]) -> String {
    let mut out = String::from("prompt\tlength\tscore");
    for j in 0..questions.len() {
        out.push_str(&format!("\tq{:02}", j + 1));
    }
    out.push('\n');
    for s in scores {
        out.push_str(&format!("{}\t{}\t{:.6}", s.candidate.prompt, s.candidate.length, s.score));
        for v in &s.per_question {
            out.push_str(&format!("\t{v:.4}"));
        }
        out.push('\n');
    }
    out
}

const SECTIONS: [&str; 5] = ["CLINICAL HISTORY:", "MEDICATIONS:", "TECHNIQUE:", "FINDINGS:", "IMPRESSION:"];

/// Splits a templated report into `(heading, body)` sections.
pub fn sections(report: &str) -> Vec<(&'static str, String)> {
    let mut marks: Vec<(usize, &'static str)> = SECTIONS.iter().filter_map(|h| report.find(h).map(|i| (i, *h))).collect();
    marks.sort_unstable();
    marks
        .iter()
        .enumerate()
        .map(|(k, &(i, h))| {
            let end = marks.get(k + 1).map_or(report.len(), |m| m.0);
            (h, report[i + h.len()..end].trim().to_string())
        })
        .collect()
}

fn section<'a>(secs: &'a [(&'static str, String)], head: &str) -> Option<&'a str> {
    secs.iter().find(|(h, _)| *h == head).map(|(_, b)| b.as_str())
}

/// Deterministic stand-in model. Summaries reorder and trim report sections;
/// answers come from keyword lookup against the cohort's phrase inventory.
#[derive(Clone, Debug)]
pub struct MockClient {
    pub phrases: Vec<String>,
}

impl MockClient {
    pub fn new(cfg: &CohortConfig) -> Self {
        let mut phrases: Vec<String> = cfg
            .phenotypes
            .iter()
            .flat_map(|p| p.report_phrases.iter().cloned())
            .chain(cfg.medications.iter().map(|m| m.replace('_', " ")))
            .chain(
                [
                    "epileptiform discharges",
                    "seizure",
                    "photic driving",
                    "hyperventilation",
                    "photic stimulation",
                    "muscle artifact",
                    "eye movement artifact",
                ]
                .map(String::from),
            )
            .collect();
        // longest first so specific phrases win
        phrases.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
        phrases.dedup();
        Self { phrases }
    }

    fn boolean(&self, text: &str, q: &str) -> String {
        let ql = q.to_lowercase();
        let lower = text.to_lowercase();
        if ql.contains("abnormal") {
            return yes_no(lower.contains("abnormal study"));
        }
        if ql.contains("normal") {
            return yes_no(lower.contains("normal study") && !lower.contains("abnormal study"));
        }
        if ql.contains("performed") {
            let Some(p) = self.phrases.iter().find(|p| ql.contains(p.as_str())) else { return "no".into() };
            let mentioned = lower
                .split('.')
                .any(|s| s.contains(&p.to_lowercase()) && s.contains("performed") && !s.contains("not performed"));
            return yes_no(mentioned);
        }
        match self.phrases.iter().find(|p| ql.contains(p.as_str())) {
            Some(p) => yes_no(report_mentions(text, p) == Some(true)),
            None => "no".into(),
        }
    }

    fn integer(&self, text: &str, q: &str) -> String {
        let ql = q.to_lowercase();
        let secs = sections(text);
        if ql.contains("old") || ql.contains("age") {
            return text
                .find("-year-old")
                .and_then(|i| text[..i].rsplit(|c: char| !c.is_ascii_digit()).next().map(String::from))
                .filter(|s| !s.is_empty())
                .unwrap_or_else(|| "unknown".into());
        }
        if ql.contains("hz") || ql.contains("frequency") {
            let lower = text.to_lowercase();
            return lower
                .find(" hz")
                .and_then(|i| lower[..i].rsplit(' ').next().map(String::from))
                .unwrap_or_else(|| "unknown".into());
        }
        if ql.contains("medication") {
            let n = section(&secs, "MEDICATIONS:").map_or(0, |b| b.split(',').filter(|s| !s.trim().is_empty()).count());
            return n.to_string();
        }
        if ql.contains("abnormal finding") {
            let n = section(&secs, "FINDINGS:").map_or(0, |b| b.matches("There is").count());
            return n.to_string();
        }
        "unknown".into()
    }

    fn free_text(&self, text: &str, q: &str) -> String {
        let ql = q.to_lowercase();
        let secs = sections(text);
        let pick = |h: &str| section(&secs, h).unwrap_or("none").trim_end_matches('.').to_string();
        if ql.contains("medication") {
            pick("MEDICATIONS:")
        } else if ql.contains("impression") {
            pick("IMPRESSION:")
        } else if ql.contains("history") {
            pick("CLINICAL HISTORY:")
        } else if ql.contains("finding") {
            let f = section(&secs, "FINDINGS:").unwrap_or("");
            let found: Vec<&str> = f.split('.').map(str::trim).filter(|s| s.starts_with("There is")).collect();
            if found.is_empty() {
                "none".into()
            } else {
                found.join(". ")
            }
        } else {
            "unknown".into()
        }
    }
}

fn yes_no(b: bool) -> String {
    if b { "yes" } else { "no" }.into()
}

/// First `n` whitespace tokens.
pub fn truncate_tokens(text: &str, n: usize) -> String {
    text.split_whitespace().take(n).collect::<Vec<_>>().join(" ")
}

impl LlmClient for MockClient {
    fn summarize(&self, report: &str, prompt: &str, max_tokens: usize) -> Result<String> {
        let secs = sections(report);
        let order: &[&str] = match prompt {
            "verbatim" => return Ok(truncate_tokens(report, max_tokens)),
            "findings-first" => &["FINDINGS:", "IMPRESSION:", "CLINICAL HISTORY:", "MEDICATIONS:"],
            "impression-only" => &["IMPRESSION:", "CLINICAL HISTORY:"],
            other => return config(format!("mock client has no prompt {other:?}")),
        };
        let mut out = Vec::new();
        for h in order {
            if let Some(b) = section(&secs, h) {
                out.push(format!("{h} {b}"));
            }
        }
        Ok(truncate_tokens(&out.join(" "), max_tokens))
    }

    fn answer(&self, text: &str, question: &Question) -> Result<String> {
        Ok(match question.kind {
            QuestionKind::Boolean => self.boolean(text, &question.text),
            QuestionKind::Integer => self.integer(text, &question.text),
            QuestionKind::FreeText => self.free_text(text, &question.text),
        })
    }

    fn judge_similarity(&self, a: &str, b: &str) -> Result<f64> {
        Ok(token_jaccard(a, b))
    }
}

/// Client speaking one JSON object per line over a stream socket.
///
/// Requests: `{"op":"summarize","report":..,"prompt":..,"max_tokens":..}`,
/// `{"op":"answer","text":..,"question":..,"kind":..}` and
/// `{"op":"judge","a":..,"b":..}`. Replies: `{"ok":true,"text":..}` or
/// `{"ok":true,"score":..}`, and `{"ok":false,"error":..}` on failure.
#[derive(Clone, Debug)]
pub struct SocketClient {
    pub addr: String,
    pub timeout: Duration,
}

#[derive(Deserialize)]
struct Reply {
    ok: bool,
    text: Option<String>,
    score: Option<f64>,
    error: Option<String>,
}

impl SocketClient {
    pub fn new(addr: &str, timeout_ms: u64) -> Self {
        Self {
            addr: addr.into(),
            timeout: Duration::from_millis(timeout_ms.max(1)),
        }
    }

    fn call(&self, req: serde_json::Value) -> Result<Reply> {
        let err = |e: std::io::Error| CoreError::Client(format!("{}: {e}", self.addr));
        let line = format!("{req}\n");
        let mut reply = String::new();
        #[cfg(unix)]
        if self.addr.starts_with('/') {
            let mut s = std::os::unix::net::UnixStream::connect(&self.addr).map_err(err)?;
            s.set_read_timeout(Some(self.timeout)).map_err(err)?;
            s.write_all(line.as_bytes()).map_err(err)?;
            BufReader::new(s).read_line(&mut reply).map_err(err)?;
            return self.parse(&reply);
        }
        let addr = std::net::ToSocketAddrs::to_socket_addrs(self.addr.as_str())
            .map_err(err)?
            .next()
            .ok_or_else(|| CoreError::Client(format!("{}: no address", self.addr)))?;
        let mut s = std::net::TcpStream::connect_timeout(&addr, self.timeout).map_err(err)?;
        s.set_read_timeout(Some(self.timeout)).map_err(err)?;
        s.write_all(line.as_bytes()).map_err(err)?;
        BufReader::new(s).read_line(&mut reply).map_err(err)?;
        self.parse(&reply)
    }

    fn parse(&self, line: &str) -> Result<Reply> {
        let r: Reply = serde_json::from_str(line.trim()).map_err(|e| CoreError::Client(format!("{}: bad reply: {e}", self.addr)))?;
        if !r.ok {
            return Err(CoreError::Client(r.error.unwrap_or_else(|| "request failed".into())));
        }
        Ok(r)
    }

    fn text(&self, req: serde_json::Value) -> Result<String> {
        self.call(req)?
            .text
            .ok_or_else(|| CoreError::Client(format!("{}: reply without text", self.addr)))
    }
}

impl LlmClient for SocketClient {
    fn summarize(&self, report: &str, prompt: &str, max_tokens: usize) -> Result<String> {
        self.text(json!({"op": "summarize", "report": report, "prompt": prompt, "max_tokens": max_tokens}))
    }

    fn answer(&self, text: &str, question: &Question) -> Result<String> {
        self.text(json!({"op": "answer", "text": text, "question": question.text, "kind": question.kind.name()}))
    }

    fn judge_similarity(&self, a: &str, b: &str) -> Result<f64> {
        self.call(json!({"op": "judge", "a": a, "b": b}))?
            .score
            .ok_or_else(|| CoreError::Client(format!("{}: reply without score", self.addr)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numerals() {
        assert_eq!(first_numeral("8.0 Hz"), (Some(8.0), false));
        assert_eq!(first_numeral("between 8 and 9"), (Some(8.0), true));
        assert_eq!(first_numeral("none"), (None, false));
        assert_eq!(first_numeral("rhythm is 9."), (Some(9.0), false));
    }

    #[test]
    fn sections_split_in_order() {
        let s = sections("CLINICAL HISTORY: a. MEDICATIONS: b, c. TECHNIQUE: t. FINDINGS: f. IMPRESSION: i.");
        assert_eq!(s.len(), 5);
        assert_eq!(s[1], ("MEDICATIONS:", "b, c.".to_string()));
        assert_eq!(s[4].1, "i.");
    }

    #[test]
    fn question_file_round_trip() {
        let qs = default_questions();
        assert_eq!(qs.len(), 24);
        assert_eq!(parse_questions(&format_questions(&qs)).unwrap(), qs);
        assert!(parse_questions("no tab here").is_err());
        assert!(parse_questions("q\tweird").is_err());
    }
}
