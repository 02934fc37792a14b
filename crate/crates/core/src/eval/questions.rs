use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use super::{EvalError, Label, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuestionFormat {
    /// One JSON object per line: `question_id`, `image`, `text` (or
    /// `question`), `label`, optional `category`.
    #[serde(rename = "pope-jsonl")]
    PopeJsonl,
    /// `image<TAB>question<TAB>label<TAB>category`; an optional header line
    /// starting with `image` is skipped. Ids are `<line number>`.
    #[serde(rename = "mme-tsv")]
    MmeTsv,
}

impl FromStr for QuestionFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "pope-jsonl" | "pope" => Ok(QuestionFormat::PopeJsonl),
            "mme-tsv" | "mme" => Ok(QuestionFormat::MmeTsv),
            other => Err(format!("unknown question format {other:?} (pope-jsonl|mme-tsv)")),
        }
    }
}

impl fmt::Display for QuestionFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QuestionFormat::PopeJsonl => "pope-jsonl",
            QuestionFormat::MmeTsv => "mme-tsv",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub question_id: String,
    pub image_id: String,
    pub question: String,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedQuestions {
    pub questions: Vec<Question>,
    pub warnings: Vec<String>,
}

#[derive(Deserialize)]
struct PopeLine {
    question_id: serde_json::Value,
    image: String,
    #[serde(alias = "question")]
    text: String,
    label: String,
    #[serde(default)]
    category: Option<String>,
}

fn id_string(v: serde_json::Value) -> std::result::Result<String, String> {
    match v {
        serde_json::Value::String(s) => Ok(s),
        serde_json::Value::Number(n) => Ok(n.to_string()),
        other => Err(format!("question_id must be a string or number, got {other}")),
    }
}

pub fn load_questions(path: impl AsRef<Path>, format: QuestionFormat) -> Result<LoadedQuestions> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_questions(&text, format, &path.display().to_string())
}

/// Parse question text; `origin` names the source in error messages.
pub fn parse_questions(text: &str, format: QuestionFormat, origin: &str) -> Result<LoadedQuestions> {
    let err = |line: usize, message: String| EvalError::Parse {
        path: origin.to_string(),
        line,
        message,
    };
    let mut questions = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let q = match format {
            QuestionFormat::PopeJsonl => {
                let p: PopeLine =
                    serde_json::from_str(line).map_err(|e| err(line_no, e.to_string()))?;
                Question {
                    question_id: id_string(p.question_id).map_err(|m| err(line_no, m))?,
                    image_id: p.image,
                    question: p.text,
                    label: p.label.parse().map_err(|m| err(line_no, m))?,
                    category: p.category,
                }
            }
            QuestionFormat::MmeTsv => {
                let cols: Vec<&str> = line.split('\t').collect();
                if line_no == 1 && cols.first().map(|c| c.trim()) == Some("image") {
                    continue;
                }
                if cols.len() != 4 {
                    return Err(err(line_no, format!("expected 4 tab-separated fields, got {}", cols.len())));
                }
                Question {
                    question_id: line_no.to_string(),
                    image_id: cols[0].trim().to_string(),
                    question: cols[1].trim().to_string(),
                    label: cols[2].parse().map_err(|m| err(line_no, m))?,
                    category: Some(cols[3].trim().to_string()),
                }
            }
        };
        if q.image_id.is_empty() {
            return Err(err(line_no, "empty image field".into()));
        }
        questions.push(q);
    }
    let mut seen = HashSet::new();
    let mut warnings = Vec::new();
    for q in &questions {
        if !seen.insert(q.question_id.as_str()) {
            let w = format!("{origin}: duplicate question_id {:?}; keeping both", q.question_id);
            warn!("{w}");
            warnings.push(w);
        }
    }
    Ok(LoadedQuestions { questions, warnings })
}

/// Corrected labels as a JSON object `{ "<question_id>": "yes" | "no", ... }`.
pub fn load_label_overrides(path: impl AsRef<Path>) -> Result<BTreeMap<String, Label>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| EvalError::Parse {
        path: path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Replace labels by question id. Returns how many questions changed label
/// plus warnings for ids that match no question.
pub fn apply_label_overrides(
    questions: &mut [Question],
    overrides: &BTreeMap<String, Label>,
) -> (usize, Vec<String>) {
    let mut changed = 0;
    let mut used = HashSet::new();
    for q in questions.iter_mut() {
        if let Some(&l) = overrides.get(&q.question_id) {
            used.insert(q.question_id.clone());
            if q.label != l {
                q.label = l;
                changed += 1;
            }
        }
    }
    let warnings = overrides
        .keys()
        .filter(|k| !used.contains(*k))
        .map(|k| format!("label override for unknown question_id {k:?}"))
        .collect();
    (changed, warnings)
}
