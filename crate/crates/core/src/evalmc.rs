//! Four-option multiple-choice evaluation from last-position logits.
//!
//! For each letter `L` the candidate answer strings are `L`, `" L"` and
//! `"\nL"`; a candidate counts only when it encodes to exactly one token.
//! The letter's score is the largest full-vocabulary softmax probability
//! among its candidates, and the four scores are renormalised to sum to 1.
//! Ties go to the earliest letter.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, RunOptions, TinyLM};
use crate::tensor::kernels;
use crate::tok::Tokenizer;

pub const LETTERS: [&str; 4] = ["A", "B", "C", "D"];
pub const VARIANT_PREFIXES: [&str; 3] = ["", " ", "\n"];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: line {line}: {reason}")]
    Schema { path: PathBuf, line: usize, reason: String },
    #[error("no answer variant of letter {0:?} encodes to a single token")]
    NoEligibleVariant(String),
    #[error("invalid template: {0}")]
    Template(String),
    #[error("item {index}: {source}")]
    Item {
        index: usize,
        #[source]
        source: ModelError,
    },
    #[error("logits contain non-finite values")]
    NonFinite,
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McqItem {
    pub question: String,
    pub options: [String; 4],
    /// Gold option index, 0..4.
    pub answer: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
}

impl McqItem {
    pub fn answer_letter(&self) -> &'static str {
        LETTERS[self.answer]
    }

    /// JSONL form read back by [`load_benchmark`].
    pub fn to_json_line(&self) -> String {
        let mut v = serde_json::json!({
            "question": self.question,
            "options": self.options,
            "answer": self.answer_letter(),
        });
        if let Some(s) = &self.subject {
            v["subject"] = s.clone().into();
        }
        if let Some(id) = &self.id {
            v["id"] = id.clone().into();
        }
        v.to_string()
    }
}

/// Letters or option indices (as numbers or digit strings).
fn parse_answer(v: &serde_json::Value) -> std::result::Result<usize, String> {
    let idx = match v {
        serde_json::Value::String(s) => {
            let s = s.trim();
            match LETTERS.iter().position(|l| l.eq_ignore_ascii_case(s)) {
                Some(i) => Some(i),
                None => s.parse::<usize>().ok(),
            }
        }
        serde_json::Value::Number(n) => n.as_u64().map(|n| n as usize),
        _ => None,
    };
    idx.filter(|&i| i < 4)
        .ok_or_else(|| format!("unknown answer label {v}"))
}

#[derive(Deserialize)]
struct RawItem {
    question: String,
    options: Vec<String>,
    answer: serde_json::Value,
    subject: Option<String>,
    id: Option<serde_json::Value>,
}

fn item_from_raw(raw: RawItem) -> std::result::Result<McqItem, String> {
    let n = raw.options.len();
    let options: [String; 4] = raw
        .options
        .try_into()
        .map_err(|_| format!("expected 4 options, got {n}"))?;
    Ok(McqItem {
        question: raw.question,
        options,
        answer: parse_answer(&raw.answer)?,
        subject: raw.subject,
        id: raw.id.map(|v| match v {
            serde_json::Value::String(s) => s,
            other => other.to_string(),
        }),
    })
}

/// JSONL (`question`, `options`, `answer`, optional `subject`/`id`) or CSV
/// with columns `question, A, B, C, D, answer` and optional `subject`, `id`.
pub fn load_benchmark(path: &Path) -> Result<Vec<McqItem>> {
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let schema = |line: usize, reason: String| EvalError::Schema {
        path: path.to_path_buf(),
        line,
        reason,
    };
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let headers = rdr.headers().map_err(|e| schema(1, e.to_string()))?.clone();
        let col = |name: &str| headers.iter().position(|h| h.trim().eq_ignore_ascii_case(name));
        let need = |name: &str| col(name).ok_or_else(|| schema(1, format!("missing column {name:?}")));
        let q = need("question")?;
        let opts = [need("A")?, need("B")?, need("C")?, need("D")?];
        let ans = need("answer")?;
        let (subj, idc) = (col("subject"), col("id"));
        let mut items = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| schema(line, e.to_string()))?;
            let field = |c: usize| rec.get(c).unwrap_or("").to_string();
            let nonempty = |c: Option<usize>| c.map(field).filter(|s| !s.is_empty());
            items.push(McqItem {
                question: field(q),
                options: opts.map(field),
                answer: parse_answer(&serde_json::Value::String(field(ans))).map_err(|r| schema(line, r))?,
                subject: nonempty(subj),
                id: nonempty(idc),
            });
        }
        return Ok(items);
    }
    let mut items = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawItem = serde_json::from_str(line).map_err(|e| schema(i + 1, e.to_string()))?;
        items.push(item_from_raw(raw).map_err(|r| schema(i + 1, r))?);
    }
    Ok(items)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptFormat {
    Raw,
    Chat,
}

impl PromptFormat {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "raw" => Some(Self::Raw),
            "chat" => Some(Self::Chat),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    pub format: PromptFormat,
    pub question_label: String,
    pub answer_label: String,
    pub system_text: String,
    pub letters: [String; 4],
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            format: PromptFormat::Raw,
            question_label: "Question".into(),
            answer_label: "Answer".into(),
            system_text: "Answer the multiple-choice question with a single letter.".into(),
            letters: LETTERS.map(String::from),
        }
    }
}

impl PromptTemplate {
    pub fn validate(&self) -> Result<()> {
        for (i, l) in self.letters.iter().enumerate() {
            if l.is_empty() {
                return Err(EvalError::Template("empty option letter".into()));
            }
            if self.letters[..i].contains(l) {
                return Err(EvalError::Template(format!("duplicate option letter {l:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Prompt {
    Raw(String),
    Chat(Vec<Message>),
}

/// `{question_label}: {question}` then one `{letter}. {option}` line per
/// option, then `{answer_label}:` with no trailing space.
pub fn prompt_body(item: &McqItem, tmpl: &PromptTemplate) -> String {
    let mut s = format!("{}: {}\n", tmpl.question_label, item.question);
    for (letter, opt) in tmpl.letters.iter().zip(&item.options) {
        s.push_str(&format!("{letter}. {opt}\n"));
    }
    s.push_str(&tmpl.answer_label);
    s.push(':');
    s
}

pub fn build_prompt(item: &McqItem, tmpl: &PromptTemplate) -> Prompt {
    let body = prompt_body(item, tmpl);
    match tmpl.format {
        PromptFormat::Raw => Prompt::Raw(body),
        PromptFormat::Chat => Prompt::Chat(vec![
            Message {
                role: "system".into(),
                content: tmpl.system_text.clone(),
            },
            Message {
                role: "user".into(),
                content: body,
            },
        ]),
    }
}

/// Chat turns are rendered as `<|role|>\n{content}\n` and the text ends with
/// the assistant opener `<|assistant|>\n`.
pub fn render(prompt: &Prompt) -> String {
    match prompt {
        Prompt::Raw(s) => s.clone(),
        Prompt::Chat(msgs) => {
            let mut s = String::new();
            for m in msgs {
                s.push_str(&format!("<|{}|>\n{}\n", m.role, m.content));
            }
            s.push_str("<|assistant|>\n");
            s
        }
    }
}

/// Single-token ids of every eligible variant, per letter.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerVariants {
    pub ids: [Vec<u32>; 4],
}

impl AnswerVariants {
    pub fn new(tok: &Tokenizer, letters: &[String; 4]) -> Result<Self> {
        let mut ids: [Vec<u32>; 4] = Default::default();
        for (slot, letter) in ids.iter_mut().zip(letters) {
            for prefix in VARIANT_PREFIXES {
                let enc = tok.encode(&format!("{prefix}{letter}"));
                if enc.len() == 1 && !slot.contains(&enc[0]) {
                    slot.push(enc[0]);
                }
            }
            if slot.is_empty() {
                return Err(EvalError::NoEligibleVariant(letter.clone()));
            }
        }
        Ok(Self { ids })
    }
}

/// Renormalised letter probabilities and the predicted option index.
pub fn answer_probs(last_logits: &[f64], variants: &AnswerVariants) -> Result<([f64; 4], usize)> {
    if last_logits.iter().any(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite);
    }
    let mut full = last_logits.to_vec();
    kernels::softmax_row(&mut full);
    let mut q = [0.0f64; 4];
    let mut best_logit = [f64::NEG_INFINITY; 4];
    for (l, ids) in variants.ids.iter().enumerate() {
        for &id in ids {
            q[l] = q[l].max(full[id as usize]);
            best_logit[l] = best_logit[l].max(last_logits[id as usize]);
        }
    }
    let z: f64 = q.iter().sum();
    let probs = if z > 0.0 {
        q.map(|v| v / z)
    } else {
        // Every candidate underflowed; the same ratios via the logits.
        let mut p = best_logit.to_vec();
        kernels::softmax_row(&mut p);
        [p[0], p[1], p[2], p[3]]
    };
    let mut pred = 0;
    for l in 1..4 {
        if probs[l] > probs[pred] {
            pred = l;
        }
    }
    Ok((probs, pred))
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    /// Abort on the first failing item instead of excluding it.
    pub strict: bool,
    pub run: RunOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ItemRecord {
    pub index: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
    pub gold: String,
    pub predicted: String,
    pub probs: [f64; 4],
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubjectScore {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub format: PromptFormat,
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// Items whose prompt exceeded the model's maximum sequence length.
    pub skipped: Vec<usize>,
    /// Items excluded after a model error (non-strict mode).
    pub failed: Vec<usize>,
    pub per_subject: BTreeMap<String, SubjectScore>,
    pub items: Vec<ItemRecord>,
}

impl EvalReport {
    pub fn summary_table(&self, name: &str) -> String {
        let mut s = String::from("benchmark\tsubject\tn\taccuracy\n");
        s.push_str(&format!("{name}\tall\t{}\t{:.4}\n", self.total, self.accuracy));
        for (subj, sc) in &self.per_subject {
            s.push_str(&format!("{name}\t{subj}\t{}\t{:.4}\n", sc.total, sc.accuracy));
        }
        if !self.skipped.is_empty() {
            s.push_str(&format!(
                "# {} item(s) skipped: prompt longer than max_seq\n",
                self.skipped.len()
            ));
        }
        s
    }
}

enum Outcome {
    Done(ItemRecord),
    Skipped,
    Failed(ModelError),
}

pub fn evaluate(
    model: &TinyLM,
    items: &[McqItem],
    tmpl: &PromptTemplate,
    tok: &Tokenizer,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    tmpl.validate()?;
    let variants = AnswerVariants::new(tok, &tmpl.letters)?;
    let vocab = model.config().vocab_size;
    if let Some(&bad) = variants.ids.iter().flatten().find(|&&id| id as usize >= vocab) {
        return Err(EvalError::Template(format!(
            "answer token id {bad} is outside the model vocabulary ({vocab})"
        )));
    }
    let outcomes: Vec<Result<Outcome>> = items
        .par_iter()
        .enumerate()
        .map(|(index, item)| {
            let ids = tok.encode(&render(&build_prompt(item, tmpl)));
            if ids.len() > model.config().max_seq {
                return Ok(Outcome::Skipped);
            }
            let (logits, _) = match model.forward_raw(&ids, None, &opts.run) {
                Ok(r) => r,
                Err(e) => return Ok(Outcome::Failed(e)),
            };
            let last = &logits[(ids.len() - 1) * vocab..];
            let (probs, pred) = answer_probs(last, &variants)?;
            Ok(Outcome::Done(ItemRecord {
                index,
                id: item.id.clone(),
                subject: item.subject.clone(),
                gold: tmpl.letters[item.answer].clone(),
                predicted: tmpl.letters[pred].clone(),
                probs,
                correct: pred == item.answer,
            }))
        })
        .collect();
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    let mut failed = Vec::new();
    for (index, out) in outcomes.into_iter().enumerate() {
        match out? {
            Outcome::Done(r) => records.push(r),
            Outcome::Skipped => skipped.push(index),
            Outcome::Failed(source) if opts.strict => return Err(EvalError::Item { index, source }),
            Outcome::Failed(_) => failed.push(index),
        }
    }
    let correct = records.iter().filter(|r| r.correct).count();
    let total = records.len();
    let mut per_subject: BTreeMap<String, SubjectScore> = BTreeMap::new();
    for r in &records {
        if let Some(s) = &r.subject {
            let e = per_subject.entry(s.clone()).or_insert(SubjectScore {
                correct: 0,
                total: 0,
                accuracy: 0.0,
            });
            e.total += 1;
            e.correct += r.correct as usize;
        }
    }
    for s in per_subject.values_mut() {
        s.accuracy = s.correct as f64 / s.total as f64;
    }
    Ok(EvalReport {
        format: tmpl.format,
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        correct,
        total,
        skipped,
        failed,
        per_subject,
        items: records,
    })
}
