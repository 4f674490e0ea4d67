//! Tolerant parsing of model completions into structured opinions, criteria
//! lists and criteria clusterings.
//!
//! Completions follow the Python-dict layout used in the prompts:
//!
//! ```text
//! {1: {"Stance": "Agree", "Criteria": ["teamwork", "goals"], "Reason": "..."}, 2: {...}}
//! ```
//!
//! Parsing walks a repair ladder. A strictly valid literal parses with no
//! warnings. Otherwise quote-style normalization, trailing-comma tolerance and
//! truncation recovery (dropping the last incomplete record) are applied in
//! turn, each appending a warning and setting [`ParseOutcome::recovered`].

pub mod literal;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::TaskType;
use crate::text::normalize_phrase;
use literal::{LitError, Reader, Repairs, Value};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("no opening brace found")]
    NoDict,
    #[error("zero recoverable records ({0})")]
    NoRecords(String),
    #[error("no list literal found")]
    NoList,
    #[error("malformed literal: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stance {
    Agree,
    Disagree,
    Hate,
    NotHate,
    None,
}

impl Stance {
    /// Normalizes a surface label such as `"agree"`, `"Hate Speech"` or
    /// `"Not Hate Speech"`.
    pub fn from_label(label: &str) -> Option<Stance> {
        let cleaned: String = label
            .trim()
            .trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
            .to_lowercase()
            .replace(['-', '_'], " ");
        let words: Vec<&str> = cleaned.split_whitespace().collect();
        match words.join(" ").as_str() {
            "agree" | "agrees" => Some(Stance::Agree),
            "disagree" | "disagrees" => Some(Stance::Disagree),
            "hate speech" | "hate" | "hateful" => Some(Stance::Hate),
            "not hate speech" | "not hate" | "non hate speech" | "non hate" | "nothate" => {
                Some(Stance::NotHate)
            }
            _ => None,
        }
    }

    /// Label as written in prompts.
    pub fn label(self) -> &'static str {
        match self {
            Stance::Agree => "Agree",
            Stance::Disagree => "Disagree",
            Stance::Hate => "Hate Speech",
            Stance::NotHate => "Not Hate Speech",
            Stance::None => "None",
        }
    }

    /// Short machine key used in reports.
    pub fn key(self) -> &'static str {
        match self {
            Stance::Agree => "agree",
            Stance::Disagree => "disagree",
            Stance::Hate => "hate",
            Stance::NotHate => "not_hate",
            Stance::None => "all",
        }
    }

    /// Stances a task admits, in reporting order.
    pub fn for_task(task: TaskType) -> &'static [Stance] {
        match task {
            TaskType::Stance => &[Stance::Agree, Stance::Disagree],
            TaskType::Labeling => &[Stance::Hate, Stance::NotHate],
            TaskType::Generation => &[Stance::None],
        }
    }

    pub fn admitted_by(self, task: TaskType) -> bool {
        Stance::for_task(task).contains(&self)
    }
}

impl fmt::Display for Stance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// One parsed model opinion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Opinion {
    pub index: u32,
    pub stance: Stance,
    #[serde(default)]
    pub criteria: Vec<String>,
    pub reason: String,
    /// Story sentence for generation tasks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub continuation: Option<String>,
}

impl Opinion {
    pub fn new(index: u32, stance: Stance, criteria: &[&str], reason: &str) -> Self {
        Self {
            index,
            stance,
            criteria: criteria.iter().map(|c| c.to_string()).collect(),
            reason: reason.to_string(),
            continuation: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseOutcome {
    pub opinions: Vec<Opinion>,
    pub recovered: bool,
    pub warnings: Vec<String>,
}

/// Scans forward from `from` tracking brace depth and quoted strings.
/// Returns the end (exclusive) of the balanced region, or `None` when the
/// input ends first.
fn balanced_end(chars: &[char], from: usize, open: char, close: char) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_str: Option<char> = None;
    let mut prev_sig = open;
    let mut i = from;
    while i < chars.len() {
        let c = chars[i];
        if let Some(q) = in_str {
            if c == '\\' {
                i += 2;
                continue;
            }
            let closes = match q {
                '"' | '\u{201C}' | '\u{201D}' => c == '"' || c == '\u{201D}',
                _ => c == '\'' || c == '\u{2019}',
            };
            if closes {
                let next = chars[i + 1..].iter().find(|c| !c.is_whitespace());
                if matches!(next, None | Some(',' | ':' | '}' | ']')) {
                    in_str = None;
                    prev_sig = c;
                }
            }
            i += 1;
            continue;
        }
        if literal::is_open_quote(c) && matches!(prev_sig, '{' | '[' | ',' | ':') {
            in_str = Some(c);
        } else if c == open {
            depth += 1;
        } else if c == close {
            depth = depth.saturating_sub(1);
            if depth == 0 {
                return Some(i + 1);
            }
        }
        if !c.is_whitespace() {
            prev_sig = c;
        }
        i += 1;
    }
    None
}

/// Returns the dict literal inside a completion, dropping surrounding prose
/// and code fences. A truncated completion yields everything from the first
/// `{` onward.
pub fn extract_dict_region(completion: &str) -> Result<String, ParseError> {
    let chars: Vec<char> = completion.chars().collect();
    let start = chars
        .iter()
        .position(|&c| c == '{')
        .ok_or(ParseError::NoDict)?;
    match balanced_end(&chars, start, '{', '}') {
        Some(end) => Ok(chars[start..end].iter().collect()),
        None => {
            let tail: String = chars[start..].iter().collect();
            let tail = tail.trim_end();
            let tail = tail.strip_suffix("```").unwrap_or(tail).trim_end();
            Ok(tail.to_string())
        }
    }
}

fn repair_warnings(rep: &Repairs, warnings: &mut Vec<String>) {
    if rep.quote_style {
        warnings.push("repair: normalized quote style".to_string());
    }
    if rep.trailing_comma {
        warnings.push("repair: tolerated trailing comma".to_string());
    }
    if rep.missing_comma {
        warnings.push("repair: inserted missing comma".to_string());
    }
}

/// Position of the next `, <int> :` record boundary at or after `from`.
fn next_record_boundary(r: &Reader<'_>, from: usize) -> Option<usize> {
    let mut i = from;
    while let Some(comma) = r.find_from(i, ',') {
        let mut j = comma + 1;
        let text = r.slice(j, (j + 16).min(r.len()));
        let trimmed = text.trim_start();
        j += text.chars().count() - trimmed.chars().count();
        let mut k = trimmed.chars().peekable();
        if matches!(k.peek(), Some('"' | '\'')) {
            k.next();
        }
        let mut digits = 0;
        while matches!(k.peek(), Some(c) if c.is_ascii_digit()) {
            k.next();
            digits += 1;
        }
        if digits > 0 {
            let rest: String = k.collect();
            let rest = rest.trim_start_matches(['"', '\'']).trim_start();
            if rest.starts_with(':') {
                return Some(j);
            }
        }
        i = comma + 1;
    }
    None
}

fn record_index(key: &Value) -> Option<u32> {
    match key {
        Value::Int(i) if *i > 0 => u32::try_from(*i).ok(),
        Value::Int(_) => None,
        other => {
            let text = other.as_text()?;
            let digits: String = text.chars().filter(|c| c.is_ascii_digit()).collect();
            digits.parse().ok().filter(|&i| i > 0)
        }
    }
}

fn field<'v>(fields: &'v [(Value, Value)], names: &[&str]) -> Option<&'v Value> {
    fields.iter().find_map(|(k, v)| {
        let k = k.as_text()?.trim().to_lowercase();
        names.contains(&k.as_str()).then_some(v)
    })
}

fn phrases(value: &Value) -> Vec<String> {
    match value {
        Value::List(items) => items
            .iter()
            .filter_map(Value::as_text)
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty() && s != "...")
            .collect(),
        other => other
            .as_text()
            .map(|s| {
                s.split(',')
                    .map(|p| p.trim().to_string())
                    .filter(|p| !p.is_empty())
                    .collect()
            })
            .unwrap_or_default(),
    }
}

fn to_opinion(
    index: u32,
    value: &Value,
    task: TaskType,
    warnings: &mut Vec<String>,
) -> Option<Opinion> {
    let Value::Dict(fields) = value else {
        warnings.push(format!("record {index}: not a dict, dropped"));
        return None;
    };
    let reason = field(fields, &["reason", "reasons", "explanation"])
        .and_then(Value::as_text)
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty());
    let Some(reason) = reason else {
        warnings.push(format!("record {index}: missing reason, dropped"));
        return None;
    };
    let criteria = field(fields, &["criteria", "criterion"])
        .map(phrases)
        .unwrap_or_default();
    let stance = if task.has_stance() {
        let label = field(fields, &["stance", "label"]).and_then(Value::as_text);
        match label.as_deref().map(Stance::from_label) {
            Some(Some(s)) if s.admitted_by(task) => s,
            Some(Some(s)) => {
                warnings.push(format!(
                    "record {index}: stance {s} not valid for {task} task, dropped"
                ));
                return None;
            }
            Some(None) => {
                warnings.push(format!(
                    "record {index}: unrecognized stance {:?}, dropped",
                    label.unwrap_or_default()
                ));
                return None;
            }
            None => {
                warnings.push(format!("record {index}: missing stance, dropped"));
                return None;
            }
        }
    } else {
        Stance::None
    };
    let continuation = field(fields, &["story", "continuation", "sentence"])
        .and_then(Value::as_text)
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty());
    Some(Opinion {
        index,
        stance,
        criteria,
        reason,
        continuation,
    })
}

/// Parses a dict region of numbered opinion records.
pub fn parse_opinion_dict(region: &str, task: TaskType) -> Result<ParseOutcome, ParseError> {
    let mut r = Reader::new(region);
    r.skip_ws();
    if r.peek() != Some('{') {
        return Err(ParseError::NoDict);
    }
    r.bump();

    let mut warnings = Vec::new();
    let mut raw: Vec<(Value, Value)> = Vec::new();
    let mut truncated = false;
    let mut skipped = false;
    loop {
        r.skip_ws();
        while r.peek() == Some(',') {
            r.bump();
            r.skip_ws();
        }
        match r.peek() {
            None => {
                truncated = true;
                break;
            }
            Some('}') => break,
            _ => {}
        }
        let start = r.pos();
        let entry = (|| -> Result<(Value, Value), LitError> {
            let key = r.value()?;
            r.skip_ws();
            match r.peek() {
                None => return Err(LitError::Eof),
                Some(':') => {
                    r.bump();
                }
                Some(c) => {
                    return Err(LitError::Syntax {
                        pos: r.pos(),
                        message: format!("expected ':' found {c:?}"),
                    })
                }
            }
            r.skip_ws();
            if r.peek() == Some('{') {
                let (value, closed_at_eof) = r.dict_closing_at_eof()?;
                if closed_at_eof {
                    warnings.push("repair: closed truncated last record".to_string());
                }
                return Ok((key, value));
            }
            let value = r.value()?;
            Ok((key, value))
        })();
        match entry {
            Ok(kv) => {
                raw.push(kv);
                match r.separator('}') {
                    Ok(true) => break,
                    Ok(false) => {}
                    Err(LitError::Eof) => {
                        truncated = true;
                        break;
                    }
                    Err(LitError::Syntax { message, .. }) => {
                        skipped = true;
                        warnings.push(format!("malformed separator ({message})"));
                        match next_record_boundary(&r, r.pos()) {
                            Some(p) => r.set_pos(p),
                            None => break,
                        }
                    }
                }
            }
            Err(LitError::Eof) => {
                truncated = true;
                if !r.slice(start, r.len()).trim().is_empty() {
                    warnings.push("repair: dropped incomplete last record".to_string());
                }
                break;
            }
            Err(LitError::Syntax { message, .. }) => {
                skipped = true;
                warnings.push(format!("skipped malformed record ({message})"));
                match next_record_boundary(&r, start) {
                    Some(p) => r.set_pos(p),
                    None => break,
                }
            }
        }
    }

    let mut rep = r.repairs;
    rep.truncated |= truncated;
    repair_warnings(&rep, &mut warnings);
    if truncated && !warnings.iter().any(|w| w.contains("incomplete")) {
        warnings.push("repair: closed truncated dict".to_string());
    }

    if raw.is_empty() {
        if skipped || truncated {
            return Err(ParseError::NoRecords(warnings.join("; ")));
        }
        warnings.push("no records".to_string());
        return Ok(ParseOutcome {
            opinions: Vec::new(),
            recovered: rep.any(),
            warnings,
        });
    }

    let mut seen = BTreeSet::new();
    let mut opinions = Vec::new();
    let mut next_free = 1u32;
    for (key, value) in &raw {
        let index = match record_index(key) {
            Some(i) => i,
            None => {
                let assigned = seen.iter().next_back().map_or(next_free, |m| m + 1);
                warnings.push(format!(
                    "record key {key:?} is not a positive integer, assigned index {assigned}"
                ));
                assigned
            }
        };
        if seen.contains(&index) {
            warnings.push(format!("duplicate index {index}, kept first occurrence"));
            continue;
        }
        if let Some(op) = to_opinion(index, value, task, &mut warnings) {
            seen.insert(index);
            next_free = index + 1;
            opinions.push(op);
        }
    }
    if opinions.is_empty() {
        return Err(ParseError::NoRecords(warnings.join("; ")));
    }
    opinions.sort_by_key(|o| o.index);
    Ok(ParseOutcome {
        opinions,
        recovered: rep.any() || skipped,
        warnings,
    })
}

/// `extract_dict_region` followed by `parse_opinion_dict`.
pub fn parse_completion(completion: &str, task: TaskType) -> Result<ParseOutcome, ParseError> {
    let region = extract_dict_region(completion)?;
    parse_opinion_dict(&region, task)
}

/// Reads a top-level list element by element, keeping completed elements
/// when the input is truncated.
fn read_list_lenient(r: &mut Reader<'_>) -> Result<(Vec<Value>, bool), ParseError> {
    if r.peek() != Some('[') {
        return Err(ParseError::NoList);
    }
    r.bump();
    let mut items = Vec::new();
    loop {
        r.skip_ws();
        match r.peek() {
            None => return Ok((items, true)),
            Some(']') => {
                r.bump();
                return Ok((items, false));
            }
            _ => {}
        }
        match r.value() {
            Ok(v) => items.push(v),
            Err(LitError::Eof) => return Ok((items, true)),
            Err(LitError::Syntax { message, .. }) => return Err(ParseError::Malformed(message)),
        }
        match r.separator(']') {
            Ok(true) => return Ok((items, false)),
            Ok(false) => {}
            Err(LitError::Eof) => return Ok((items, true)),
            Err(LitError::Syntax { message, .. }) => return Err(ParseError::Malformed(message)),
        }
    }
}

fn scalar_group(items: &[Value]) -> Vec<String> {
    items
        .iter()
        .filter_map(Value::as_text)
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

/// Parses a list-of-lists clustering answer. Also accepts the common slip
/// where the outer opening bracket is missing (`["a", "b"], ["c"]]`).
pub fn parse_cluster_output(completion: &str) -> Result<Vec<Vec<String>>, ParseError> {
    let start = completion.find('[').ok_or(ParseError::NoList)?;
    let tail = &completion[start..];
    let mut r = Reader::new(tail);
    let (items, _) = read_list_lenient(&mut r)?;

    let mut groups: Vec<Vec<String>> = Vec::new();
    if items.iter().all(Value::is_scalar) && !items.is_empty() {
        groups.push(scalar_group(&items));
        // missing outer bracket: keep reading sibling lists
        loop {
            r.skip_ws();
            if r.peek() != Some(',') {
                break;
            }
            r.bump();
            r.skip_ws();
            if r.peek() != Some('[') {
                break;
            }
            match read_list_lenient(&mut r) {
                Ok((more, _)) => groups.push(scalar_group(&more)),
                Err(_) => break,
            }
        }
    } else {
        for item in &items {
            match item {
                Value::List(inner) => groups.push(scalar_group(inner)),
                other => {
                    if let Some(t) = other.as_text() {
                        groups.push(vec![t.trim().to_string()]);
                    }
                }
            }
        }
    }
    groups.retain(|g| !g.is_empty());
    Ok(groups)
}

/// Extracts the first flat string list, deduplicated by normalized phrase
/// with first surface form kept.
pub fn parse_criteria_list(completion: &str) -> Result<Vec<String>, ParseError> {
    let mut offset = 0;
    while let Some(rel) = completion[offset..].find('[') {
        let start = offset + rel;
        let mut r = Reader::new(&completion[start..]);
        if let Ok((items, _)) = read_list_lenient(&mut r) {
            if items.iter().all(Value::is_scalar) {
                let mut seen = BTreeSet::new();
                return Ok(scalar_group(&items)
                    .into_iter()
                    .filter(|p| seen.insert(normalize_phrase(p)))
                    .collect());
            }
        }
        offset = start + 1;
    }
    Err(ParseError::NoList)
}

fn quote(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization is infallible")
}

/// Renders one record body, e.g. `{"Stance": "Agree", "Criteria": [...], "Reason": "..."}`.
pub fn render_record(op: &Opinion, with_criteria: bool) -> String {
    let mut parts = Vec::with_capacity(4);
    if op.stance != Stance::None {
        parts.push(format!("\"Stance\": {}", quote(op.stance.label())));
    }
    if let Some(story) = &op.continuation {
        parts.push(format!("\"Story\": {}", quote(story)));
    }
    if with_criteria {
        let crit: Vec<String> = op.criteria.iter().map(|c| quote(c)).collect();
        parts.push(format!("\"Criteria\": [{}]", crit.join(", ")));
    }
    parts.push(format!("\"Reason\": {}", quote(&op.reason)));
    format!("{{{}}}", parts.join(", "))
}

/// Records without the closing brace: `{1: {...}, 2: {...}`.
pub fn render_entries(opinions: &[Opinion], with_criteria: bool) -> String {
    let body: Vec<String> = opinions
        .iter()
        .map(|o| format!("{}: {}", o.index, render_record(o, with_criteria)))
        .collect();
    format!("{{{}", body.join(", "))
}

/// Serializes opinions in the prompt's Python-dict layout.
pub fn render_opinions(opinions: &[Opinion], with_criteria: bool) -> String {
    format!("{}}}", render_entries(opinions, with_criteria))
}
