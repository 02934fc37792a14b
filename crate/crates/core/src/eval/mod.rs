//! Benchmark ingestion, answer normalization and POPE/MME scoring.

pub mod fixture;
mod questions;
mod report;
mod run;

pub use questions::{
    apply_label_overrides, load_label_overrides, load_questions, parse_questions, LoadedQuestions,
    Question, QuestionFormat,
};
pub use report::{read_report, write_report, Report, ReportHeader, ReportSummary, REPORT_FORMAT, REPORT_VERSION};
pub use run::{
    run_benchmark, run_benchmark_parallel, seed_averaged_run, sweep, BenchmarkRun, DirImages,
    ImageSource, MemoryImages, Method, MetricStats, RunSettings, SeedAveraged, SweepRow,
};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::auxview::AuxViewError;
use crate::decode::DecodeError;
use crate::providers::ProviderError;
use crate::tensors::TensorError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("malformed benchmark: {0}")]
    Structure(String),
    #[error("invalid settings: {0}")]
    Config(String),
    #[error("image {id}: {source}")]
    Image {
        id: String,
        #[source]
        source: TensorError,
    },
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    AuxView(#[from] AuxViewError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Yes,
    No,
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "yes" => Ok(Label::Yes),
            "no" => Ok(Label::No),
            other => Err(format!("label must be yes or no, got {other:?}")),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Yes => "yes",
            Label::No => "no",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Answer {
    Yes,
    No,
    Unparseable,
}

impl Answer {
    pub fn label(self) -> Option<Label> {
        match self {
            Answer::Yes => Some(Label::Yes),
            Answer::No => Some(Label::No),
            Answer::Unparseable => None,
        }
    }
}

/// Lowercase, drop leading punctuation, cut at the first sentence end and
/// take the first standalone `yes` or `no` word.
pub fn normalize_answer(raw: &str) -> Answer {
    let text = raw
        .trim_start_matches(|c: char| c.is_whitespace() || c.is_ascii_punctuation())
        .to_lowercase();
    let sentence = text
        .split(['.', '!', '?', '\n'])
        .next()
        .unwrap_or("");
    sentence
        .split(|c: char| !c.is_alphanumeric())
        .find_map(|w| match w {
            "yes" => Some(Answer::Yes),
            "no" => Some(Answer::No),
            _ => None,
        })
        .unwrap_or(Answer::Unparseable)
}

/// One scored question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub question_id: String,
    pub image_id: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    pub label: Label,
    pub prediction: String,
    pub normalized: Answer,
    /// Set when the provider or decoder failed on this question.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl EvalRecord {
    pub fn correct(&self) -> bool {
        self.normalized.label() == Some(self.label)
    }
}

/// Counts over parseable records, with "yes" as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn from_records(records: &[EvalRecord]) -> Self {
        let mut c = Self::default();
        for r in records {
            match (r.normalized, r.label) {
                (Answer::Yes, Label::Yes) => c.tp += 1,
                (Answer::Yes, Label::No) => c.fp += 1,
                (Answer::No, Label::No) => c.tn += 1,
                (Answer::No, Label::Yes) => c.fn_ += 1,
                (Answer::Unparseable, _) => {}
            }
        }
        c
    }

    pub fn parseable(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// POPE metrics in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopeMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: ConfusionCounts,
    pub total: usize,
    pub unparseable: usize,
    /// Names of metrics whose denominator was zero (reported as 0).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub zero_division: Vec<String>,
}

fn ratio(num: usize, den: usize, name: &str, flags: &mut Vec<String>) -> f64 {
    if den == 0 {
        flags.push(name.to_string());
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

/// Harmonic mean of precision and recall (any consistent unit); 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Unparseable answers stay in the accuracy denominator and count as wrong.
pub fn pope_metrics(records: &[EvalRecord]) -> PopeMetrics {
    let counts = ConfusionCounts::from_records(records);
    let total = records.len();
    let mut flags = Vec::new();
    let accuracy = ratio(counts.tp + counts.tn, total, "accuracy", &mut flags);
    let precision = ratio(counts.tp, counts.tp + counts.fp, "precision", &mut flags);
    let recall = ratio(counts.tp, counts.tp + counts.fn_, "recall", &mut flags);
    if precision + recall == 0.0 {
        flags.push("f1".into());
    }
    PopeMetrics {
        accuracy,
        precision,
        recall,
        f1: f1_score(precision, recall),
        counts,
        total,
        unparseable: total - counts.parseable(),
        zero_division: flags,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmeCategoryScore {
    pub accuracy: f64,
    pub accuracy_plus: f64,
    pub total: f64,
    pub images: usize,
}

/// Per-category MME score: question accuracy plus the share of images whose
/// two questions are both answered correctly. Records without a category
/// are grouped under `"default"`.
pub fn mme_scores(records: &[EvalRecord]) -> Result<BTreeMap<String, MmeCategoryScore>> {
    let mut groups: BTreeMap<(&str, &str), Vec<bool>> = BTreeMap::new();
    for r in records {
        let cat = r.category.as_deref().unwrap_or("default");
        groups
            .entry((cat, r.image_id.as_str()))
            .or_default()
            .push(r.correct());
    }
    let offenders: Vec<String> = groups
        .iter()
        .filter(|(_, v)| v.len() != 2)
        .map(|((c, i), v)| format!("{c}/{i} ({} questions)", v.len()))
        .collect();
    if !offenders.is_empty() {
        return Err(EvalError::Structure(format!(
            "MME needs exactly 2 questions per image: {}",
            offenders.join(", ")
        )));
    }
    let mut out: BTreeMap<String, (usize, usize, usize)> = BTreeMap::new();
    for ((cat, _), v) in &groups {
        let e = out.entry(cat.to_string()).or_default();
        e.0 += v.iter().filter(|&&c| c).count();
        e.1 += usize::from(v.iter().all(|&c| c));
        e.2 += 1;
    }
    Ok(out
        .into_iter()
        .map(|(cat, (correct, both, images))| {
            let accuracy = 100.0 * correct as f64 / (2 * images) as f64;
            let accuracy_plus = 100.0 * both as f64 / images as f64;
            let score = MmeCategoryScore {
                accuracy,
                accuracy_plus,
                total: accuracy + accuracy_plus,
                images,
            };
            (cat, score)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn record(id: &str, image: &str, label: Label, answer: &str) -> EvalRecord {
        EvalRecord {
            question_id: id.into(),
            image_id: image.into(),
            question: String::new(),
            category: None,
            label,
            prediction: answer.into(),
            normalized: normalize_answer(answer),
            error: None,
        }
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_answer("Yes, there is a dog."), Answer::Yes);
        assert_eq!(normalize_answer("no"), Answer::No);
        assert_eq!(normalize_answer("There might be."), Answer::Unparseable);
        assert_eq!(normalize_answer("  ...NO!"), Answer::No);
        assert_eq!(normalize_answer("I think so. Yes."), Answer::Unparseable);
        assert_eq!(normalize_answer("yesterday"), Answer::Unparseable);
        assert_eq!(normalize_answer(""), Answer::Unparseable);
        assert_eq!(normalize_answer("yes <eos>"), Answer::Yes);
    }

    fn counts_records(tp: usize, fp: usize, tn: usize, fn_: usize) -> Vec<EvalRecord> {
        let mut v = Vec::new();
        let mut push = |n, label, ans| {
            for _ in 0..n {
                v.push(record("q", "i", label, ans));
            }
        };
        push(tp, Label::Yes, "yes");
        push(fp, Label::No, "yes");
        push(tn, Label::No, "no");
        push(fn_, Label::Yes, "no");
        v
    }

    #[test]
    fn hand_counted_pope() {
        let m = pope_metrics(&counts_records(3, 1, 4, 2));
        assert!((m.accuracy - 70.0).abs() < 1e-9);
        assert!((m.precision - 75.0).abs() < 1e-9);
        assert!((m.recall - 60.0).abs() < 1e-9);
        assert_eq!((m.f1 * 10.0).round() / 10.0, 66.7);
        assert!(m.zero_division.is_empty());
    }

    #[test]
    fn all_correct_is_100() {
        let m = pope_metrics(&counts_records(5, 0, 5, 0));
        for v in [m.accuracy, m.precision, m.recall, m.f1] {
            assert_eq!(v, 100.0);
        }
    }

    #[test]
    fn zero_division_flagged() {
        let m = pope_metrics(&counts_records(0, 0, 4, 0));
        assert_eq!(m.precision, 0.0);
        assert_eq!(m.recall, 0.0);
        assert_eq!(m.f1, 0.0);
        assert_eq!(m.zero_division, vec!["precision", "recall", "f1"]);
        assert_eq!(m.accuracy, 100.0);
        let empty = pope_metrics(&[]);
        assert!(empty.zero_division.contains(&"accuracy".to_string()));
    }

    #[test]
    fn unparseable_counts_as_wrong() {
        let mut v = counts_records(1, 0, 1, 0);
        v.push(record("q", "i", Label::Yes, "maybe"));
        v.push(record("q", "i", Label::No, "hmm"));
        let m = pope_metrics(&v);
        assert_eq!(m.accuracy, 50.0);
        assert_eq!(m.unparseable, 2);
        assert_eq!(m.counts.parseable(), 2);
    }

    #[test]
    fn f1_from_published_row() {
        assert_eq!((f1_score(87.3, 79.4) * 10.0).round() / 10.0, 83.2);
    }

    fn mme(image: &str, answers: [(Label, &str); 2]) -> Vec<EvalRecord> {
        answers
            .iter()
            .enumerate()
            .map(|(k, (l, a))| {
                let mut r = record(&format!("{image}-{k}"), image, *l, a);
                r.category = Some("existence".into());
                r
            })
            .collect()
    }

    #[test]
    fn mme_hand_counted() {
        let mut v = mme("a", [(Label::Yes, "yes"), (Label::No, "no")]);
        v.extend(mme("b", [(Label::Yes, "yes"), (Label::No, "yes")]));
        let s = &mme_scores(&v).unwrap()["existence"];
        assert_eq!((s.accuracy, s.accuracy_plus, s.total), (75.0, 50.0, 125.0));

        let perfect = mme("a", [(Label::Yes, "yes"), (Label::No, "no")]);
        assert_eq!(mme_scores(&perfect).unwrap()["existence"].total, 200.0);
        let wrong = mme("a", [(Label::Yes, "no"), (Label::No, "yes")]);
        assert_eq!(mme_scores(&wrong).unwrap()["existence"].total, 0.0);
    }

    #[test]
    fn mme_rejects_odd_groups() {
        let mut v = mme("a", [(Label::Yes, "yes"), (Label::No, "no")]);
        v.pop();
        let err = mme_scores(&v).unwrap_err();
        assert!(err.to_string().contains("existence/a (1 questions)"), "{err}");
    }

    proptest! {
        #[test]
        fn metrics_ignore_order(
            rows in prop::collection::vec((any::<bool>(), 0u8..3), 1..60),
            seed in any::<u64>(),
        ) {
            let answers = ["yes", "no", "unclear"];
            let v: Vec<EvalRecord> = rows
                .iter()
                .enumerate()
                .map(|(i, (l, a))| {
                    let label = if *l { Label::Yes } else { Label::No };
                    record(&i.to_string(), &(i / 2).to_string(), label, answers[*a as usize])
                })
                .collect();
            let mut shuffled = v.clone();
            // Deterministic Fisher-Yates from the seed.
            let mut s = seed;
            for i in (1..shuffled.len()).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                shuffled.swap(i, (s >> 33) as usize % (i + 1));
            }
            prop_assert_eq!(pope_metrics(&v), pope_metrics(&shuffled));
            let m = pope_metrics(&v);
            prop_assert_eq!(m.counts.parseable() + m.unparseable, m.total);
        }

        #[test]
        fn accuracy_plus_never_exceeds_accuracy(
            rows in prop::collection::vec((0u8..4, any::<bool>(), any::<bool>()), 1..40),
        ) {
            let cats = ["existence", "count", "position", "color"];
            let mut v = Vec::new();
            for (i, (c, a, b)) in rows.iter().enumerate() {
                for (k, ok) in [a, b].into_iter().enumerate() {
                    let mut r = record(&format!("{i}-{k}"), &i.to_string(), Label::Yes, if *ok { "yes" } else { "no" });
                    r.category = Some(cats[*c as usize].into());
                    v.push(r);
                }
            }
            for s in mme_scores(&v).unwrap().values() {
                prop_assert!(s.accuracy_plus <= s.accuracy);
                prop_assert!(s.total <= 200.0);
            }
        }
    }
}
