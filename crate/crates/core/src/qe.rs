//! Quality-estimation pre-fill: prompt rendering, provider abstraction,
//! response parsing and localisation of quoted errors as character spans.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{ErrorSpan, SegmentTask, Severity, SpanOrigin};

/// Error-listing prompt. Placeholders are substituted verbatim.
pub const ERROR_PROMPT_TEMPLATE: &str = r#"Your task is to identify machine translation errors and assess the tranlsation quality.

{source_lang} source:
```{source_seg}```
{target_lang} translation:
```{target_seg}```

Based on the source segment and machine translation surrounded with triple backticks,
identify error types in the translation and classify them. The categories of errors are:
accuracy (addition, mistranslation, omission, untranslated text), fluency (character enc-
oding, grammar, inconsistency, punctuation, register, spelling), style (awkward), termin-
ology (inappropriate for context, inconsistent use), non-translation, other, or no-error.

Each error is classified as one of two categories: major or minor. Major errors disrupt
the flow and make the understandability of text difficult or impossible. Minor errors
are errors that do not disrupt the flow significantly and what the text is trying to say
is still understandable."#;

/// Holistic scoring prompt, given previously annotated error spans.
pub const SCORE_PROMPT_TEMPLATE: &str = r#"Given the translation from {source_lang} to {target_lang} and the annotated error
spans, assign a score on a continuous scale from 0 to 100. The scale has following
reference points: 0="No meaning preserved", 33="Some meaning preserved", 66="Most
meaning preserved and few grammar mistakes", up to 100="Perfect meaning and grammar".

Score the following translation from {source_lang} source:
```{source_seg}```
{target_lang} translation:
```{target_seg}```
Annotated error spans:
```{error_spans}```
Score (0-100): "#;

const OMISSION_PREFIX: &str = "accuracy/omission";
const NO_ERROR: &str = "no-error";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum QeError {
    #[error("missing prompt variable `{0}`")]
    MissingVariable(&'static str),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProviderError {
    #[error("no canned response for request {0}")]
    NoResponse(String),
    #[error("provider request failed: {0}")]
    Request(String),
    #[error("provider timed out")]
    Timeout,
    #[error("cache I/O: {0}")]
    Cache(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QeRequest {
    pub source_lang: String,
    pub target_lang: String,
    pub source_seg: String,
    pub target_seg: String,
}

impl QeRequest {
    pub fn for_task(task: &SegmentTask, source_lang: &str, target_lang: &str) -> Self {
        QeRequest {
            source_lang: source_lang.to_owned(),
            target_lang: target_lang.to_owned(),
            source_seg: task.source_text.clone(),
            target_seg: task.target_text.clone(),
        }
    }

    fn check(&self) -> Result<(), QeError> {
        for (name, value) in [
            ("source_lang", &self.source_lang),
            ("target_lang", &self.target_lang),
            ("source_seg", &self.source_seg),
            ("target_seg", &self.target_seg),
        ] {
            if value.is_empty() {
                return Err(QeError::MissingVariable(name));
            }
        }
        Ok(())
    }
}

pub fn render_error_prompt(req: &QeRequest) -> Result<String, QeError> {
    req.check()?;
    Ok(fill_once(req, ERROR_PROMPT_TEMPLATE, None))
}

pub fn render_score_prompt(req: &QeRequest, error_spans: &str) -> Result<String, QeError> {
    req.check()?;
    Ok(fill_once(req, SCORE_PROMPT_TEMPLATE, Some(error_spans)))
}

// Substitutes placeholders in a single left-to-right pass so that braces inside
// the segment text are never re-expanded.
fn fill_once(req: &QeRequest, template: &str, error_spans: Option<&str>) -> String {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open..];
        let close = tail.find('}').map(|c| &tail[1..c]);
        let value = match close {
            Some("source_lang") => Some(req.source_lang.as_str()),
            Some("target_lang") => Some(req.target_lang.as_str()),
            Some("source_seg") => Some(req.source_seg.as_str()),
            Some("target_seg") => Some(req.target_seg.as_str()),
            Some("error_spans") => error_spans,
            _ => None,
        };
        match (value, close) {
            (Some(v), Some(name)) => {
                out.push_str(v);
                rest = &tail[name.len() + 2..];
            }
            _ => {
                out.push('{');
                rest = &tail[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

/// Parses the leading number of a scoring response, clamped to [0, 100].
pub fn parse_score(response: &str) -> Option<f64> {
    let trimmed = response.trim_start();
    let end = trimmed
        .find(|c: char| !(c.is_ascii_digit() || c == '.'))
        .unwrap_or(trimmed.len());
    trimmed[..end].parse::<f64>().ok().map(|v| v.clamp(0.0, 100.0))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QeErrorLine {
    pub severity: Severity,
    pub category: String,
    pub quote: String,
}

impl QeErrorLine {
    pub fn new(severity: Severity, category: &str, quote: &str) -> Self {
        QeErrorLine {
            severity,
            category: category.to_owned(),
            quote: quote.to_owned(),
        }
    }

    pub fn is_omission(&self) -> bool {
        self.category.starts_with(OMISSION_PREFIX)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedErrors {
    pub lines: Vec<QeErrorLine>,
    pub warnings: Vec<String>,
}

/// Parses a `Major:` / `Minor:` sectioned error list.
pub fn parse_error_list(response: &str) -> ParsedErrors {
    let mut parsed = ParsedErrors::default();
    let mut current: Option<Severity> = None;
    let mut saw_section = false;
    for (no, raw) in response.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        match line.to_ascii_lowercase().as_str() {
            "major:" => {
                current = Some(Severity::Major);
                saw_section = true;
                continue;
            }
            "minor:" => {
                current = Some(Severity::Minor);
                saw_section = true;
                continue;
            }
            NO_ERROR => continue,
            _ => {}
        }
        if line.ends_with(':') && !line.contains('"') {
            current = None;
            parsed.warn(format!("line {}: unknown section `{line}`", no + 1));
            continue;
        }
        let Some(severity) = current else {
            parsed.warn(format!("line {}: error outside a severity section", no + 1));
            continue;
        };
        match parse_item(line) {
            Some((category, quote)) => parsed.lines.push(QeErrorLine::new(severity, category, quote)),
            None => parsed.warn(format!("line {}: unparseable `{line}`", no + 1)),
        }
    }
    if !saw_section && parsed.lines.is_empty() && response.trim() != NO_ERROR {
        parsed.warn("response contains no severity sections".to_owned());
    }
    parsed
}

impl ParsedErrors {
    fn warn(&mut self, message: String) {
        log::warn!("{message}");
        self.warnings.push(message);
    }
}

fn parse_item(line: &str) -> Option<(&str, &str)> {
    let (category, rest) = line.split_once(" - ")?;
    let category = category.trim();
    let rest = rest.trim();
    let quote = rest.strip_prefix('"')?.strip_suffix('"')?;
    if category.is_empty() || quote.is_empty() || category == NO_ERROR {
        return None;
    }
    Some((category, quote))
}

/// Prints error lines in the format accepted by [`parse_error_list`].
pub fn format_error_list(lines: &[QeErrorLine]) -> String {
    let mut out = String::new();
    let mut current = None;
    for line in lines {
        if current != Some(line.severity) {
            out.push_str(match line.severity {
                Severity::Major => "Major:\n",
                Severity::Minor => "Minor:\n",
            });
            current = Some(line.severity);
        }
        out.push_str(&format!("{} - \"{}\"\n", line.category, line.quote));
    }
    if lines.is_empty() {
        out.push_str(NO_ERROR);
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LocatedSpans {
    pub spans: Vec<ErrorSpan>,
    pub warnings: Vec<String>,
}

/// Maps each quoted error to a character span on the display text.
///
/// A quote takes its first occurrence in the translation that no earlier line
/// has already taken. Omissions that cannot be found map to `[MISSING]`;
/// other unlocatable quotes are dropped with a warning.
pub fn locate_spans(lines: &[QeErrorLine], target_display_text: &str) -> LocatedSpans {
    let target = target_display_text
        .strip_suffix(crate::model::MISSING_SUFFIX)
        .unwrap_or(target_display_text);
    let chars: Vec<char> = target.chars().collect();
    let mut consumed: HashSet<(usize, usize)> = HashSet::new();
    let mut out = LocatedSpans::default();
    for line in lines {
        let needle: Vec<char> = line.quote.chars().collect();
        let found = occurrences(&chars, &needle).find(|&start| {
            let interval = (start, start + needle.len());
            !consumed.contains(&interval)
        });
        match found {
            Some(start) => {
                let end = start + needle.len();
                consumed.insert((start, end));
                out.spans.push(ErrorSpan::ai(start, end, line.severity));
            }
            None if line.is_omission() => {
                out.spans
                    .push(ErrorSpan::missing(target, line.severity, SpanOrigin::Ai));
            }
            None => {
                let message = format!("quote `{}` not found in translation; dropped", line.quote);
                log::warn!("{message}");
                out.warnings.push(message);
            }
        }
    }
    out
}

fn occurrences<'a>(haystack: &'a [char], needle: &'a [char]) -> impl Iterator<Item = usize> + 'a {
    let last = if needle.is_empty() || needle.len() > haystack.len() {
        0
    } else {
        haystack.len() - needle.len() + 1
    };
    (0..last).filter(move |&i| haystack[i..i + needle.len()] == *needle)
}

/// Text-in/text-out completion backend.
pub trait QeProvider: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String, ProviderError>;
}

impl<P: QeProvider + ?Sized> QeProvider for Arc<P> {
    fn complete(&self, prompt: &str) -> Result<String, ProviderError> {
        (**self).complete(prompt)
    }
}

impl<P: QeProvider + ?Sized> QeProvider for Box<P> {
    fn complete(&self, prompt: &str) -> Result<String, ProviderError> {
        (**self).complete(prompt)
    }
}

/// Hex SHA-256 of the prompt; names cache entries and canned responses.
pub fn request_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

/// Offline provider answering from canned responses keyed by request hash.
#[derive(Debug, Clone, Default)]
pub struct MockProvider {
    responses: HashMap<String, String>,
    fallback: Option<String>,
}

impl MockProvider {
    pub fn new() -> Self {
        Self::default()
    }

    /// Loads every `<hash>.txt` file of a directory. `default.txt`, when
    /// present, answers prompts without a dedicated file.
    pub fn from_dir(dir: &Path) -> std::io::Result<Self> {
        let mut mock = MockProvider::new();
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            let text = fs::read_to_string(&path)?;
            if stem == "default" {
                mock.fallback = Some(text);
            } else {
                mock.responses.insert(stem.to_owned(), text);
            }
        }
        Ok(mock)
    }

    pub fn with_response(mut self, prompt: &str, response: &str) -> Self {
        self.responses
            .insert(request_hash(prompt), response.to_owned());
        self
    }

    pub fn with_fallback(mut self, response: &str) -> Self {
        self.fallback = Some(response.to_owned());
        self
    }
}

impl QeProvider for MockProvider {
    fn complete(&self, prompt: &str) -> Result<String, ProviderError> {
        let hash = request_hash(prompt);
        self.responses
            .get(&hash)
            .or(self.fallback.as_ref())
            .cloned()
            .ok_or(ProviderError::NoResponse(hash))
    }
}

/// Provider that always fails; stands in for an unreachable backend.
#[derive(Debug, Clone)]
pub struct FailingProvider(pub ProviderError);

impl QeProvider for FailingProvider {
    fn complete(&self, _prompt: &str) -> Result<String, ProviderError> {
        Err(self.0.clone())
    }
}

/// Disk cache in front of another provider: one file per request hash.
pub struct CachedProvider<P> {
    inner: P,
    dir: PathBuf,
    key_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl<P: QeProvider> CachedProvider<P> {
    pub fn new(inner: P, dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(CachedProvider {
            inner,
            dir,
            key_locks: Mutex::new(HashMap::new()),
        })
    }

    pub fn entry_path(&self, prompt: &str) -> PathBuf {
        self.dir.join(format!("{}.txt", request_hash(prompt)))
    }

    fn lock_for(&self, hash: &str) -> Arc<Mutex<()>> {
        let mut locks = self.key_locks.lock().unwrap_or_else(|e| e.into_inner());
        locks.entry(hash.to_owned()).or_default().clone()
    }
}

impl<P: QeProvider> QeProvider for CachedProvider<P> {
    fn complete(&self, prompt: &str) -> Result<String, ProviderError> {
        let hash = request_hash(prompt);
        let path = self.dir.join(format!("{hash}.txt"));
        let lock = self.lock_for(&hash);
        let _guard = lock.lock().unwrap_or_else(|e| e.into_inner());
        if let Ok(text) = fs::read_to_string(&path) {
            return Ok(text);
        }
        let text = self.inner.complete(prompt)?;
        let tmp = self.dir.join(format!("{hash}.tmp"));
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(text.as_bytes())?;
            f.sync_all()?;
            fs::rename(&tmp, &path)
        };
        write().map_err(|e| ProviderError::Cache(e.to_string()))?;
        Ok(text)
    }
}

/// Result of pre-filling one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefillOutcome {
    pub task: SegmentTask,
    pub warnings: Vec<String>,
}

/// Renders, queries, parses and localises; attaches AI spans to the task.
///
/// Provider failures never block annotation: the task comes back with an
/// empty pre-fill and `provider_error` set.
pub fn prefill_segment(
    task: &SegmentTask,
    provider: &dyn QeProvider,
    source_lang: &str,
    target_lang: &str,
) -> PrefillOutcome {
    let mut task = task.clone();
    task.prefill_spans.clear();
    task.provider_error = None;
    let prompt = match render_error_prompt(&QeRequest::for_task(&task, source_lang, target_lang)) {
        Ok(p) => p,
        Err(e) => {
            task.provider_error = Some(e.to_string());
            return PrefillOutcome {
                task,
                warnings: vec![],
            };
        }
    };
    match provider.complete(&prompt) {
        Ok(response) => {
            let parsed = parse_error_list(&response);
            let located = locate_spans(&parsed.lines, &task.target_display_text);
            task.prefill_spans = located.spans;
            let mut warnings = parsed.warnings;
            warnings.extend(located.warnings);
            PrefillOutcome { task, warnings }
        }
        Err(e) => {
            log::warn!("QE provider failed for {}: {e}", task.key());
            task.provider_error = Some(e.to_string());
            PrefillOutcome {
                task,
                warnings: vec![],
            }
        }
    }
}
