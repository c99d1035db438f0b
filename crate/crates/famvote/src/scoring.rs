//! Answer normalization, per-question scoring, and the model x question
//! accuracy matrix.
//!
//! Normalization is total and idempotent: normalize(normalize(s)) ==
//! normalize(s) for every string. Soft scoring follows the 10-annotator
//! consensus rule with leave-one-out averaging by default; the simpler
//! min(matches/3, 1) variant is available behind a flag.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{LabelAnswers, LabelSet, PredictionSet, ScoreMode};
use crate::error::{FamvoteError, Result};

/// Soft scoring rule over the 10 annotator answers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftVariant {
    /// Average over leave-one-out annotator subsets.
    #[default]
    LeaveOneOut,
    /// min(matches / 3, 1) over all annotators.
    Simple,
}

impl std::str::FromStr for SoftVariant {
    type Err = FamvoteError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "leave_one_out" => Ok(SoftVariant::LeaveOneOut),
            "simple" => Ok(SoftVariant::Simple),
            other => Err(FamvoteError::usage(format!(
                "unknown soft variant `{other}` (expected `leave_one_out` or `simple`)"
            ))),
        }
    }
}

const ARTICLES: [&str; 3] = ["a", "an", "the"];

const NUMBER_WORDS: [(&str, &str); 11] = [
    ("zero", "0"),
    ("one", "1"),
    ("two", "2"),
    ("three", "3"),
    ("four", "4"),
    ("five", "5"),
    ("six", "6"),
    ("seven", "7"),
    ("eight", "8"),
    ("nine", "9"),
    ("ten", "10"),
];

/// Canonicalizes a free-form answer string.
///
/// Steps, in order: lowercase; drop ASCII punctuation unless the character
/// sits between two digits (so "1,000" and "3.5" survive); collapse
/// whitespace runs to single spaces and trim; drop leading articles
/// (a/an/the); map the number words zero through ten to digits.
pub fn normalize_answer(answer: &str) -> String {
    let lowered = answer.to_lowercase();
    let chars: Vec<char> = lowered.chars().collect();
    let mut stripped = String::with_capacity(lowered.len());
    for (i, &c) in chars.iter().enumerate() {
        if c.is_ascii_punctuation() {
            let prev_digit = i > 0 && chars[i - 1].is_ascii_digit();
            let next_digit = i + 1 < chars.len() && chars[i + 1].is_ascii_digit();
            if prev_digit && next_digit {
                stripped.push(c);
            }
        } else {
            stripped.push(c);
        }
    }
    let mut tokens: Vec<&str> = stripped.split_whitespace().collect();
    while let Some(first) = tokens.first() {
        if ARTICLES.contains(first) {
            tokens.remove(0);
        } else {
            break;
        }
    }
    let mapped: Vec<&str> = tokens
        .into_iter()
        .map(|t| {
            NUMBER_WORDS
                .iter()
                .find(|(word, _)| *word == t)
                .map(|(_, digit)| *digit)
                .unwrap_or(t)
        })
        .collect();
    mapped.join(" ")
}

/// Soft score of a normalized candidate against normalized annotator answers.
pub fn soft_score(candidate_norm: &str, annotators_norm: &[String], variant: SoftVariant) -> f64 {
    let n = annotators_norm.len();
    if n == 0 {
        return 0.0;
    }
    let matches: Vec<bool> = annotators_norm.iter().map(|a| a == candidate_norm).collect();
    let total = matches.iter().filter(|&&m| m).count();
    match variant {
        SoftVariant::Simple => (total as f64 / 3.0).min(1.0),
        SoftVariant::LeaveOneOut => {
            let mut acc = 0.0;
            for &hit in &matches {
                let held_out = total - usize::from(hit);
                acc += (held_out as f64 / 3.0).min(1.0);
            }
            acc / n as f64
        }
    }
}

/// Scores one raw answer against one label record. Output is in [0, 1].
pub fn score_answer(raw_answer: &str, answers: &LabelAnswers, variant: SoftVariant) -> f64 {
    let candidate = normalize_answer(raw_answer);
    match answers {
        LabelAnswers::Exact(gold) => {
            if candidate == normalize_answer(gold) {
                1.0
            } else {
                0.0
            }
        }
        LabelAnswers::Soft(annotators) => {
            let normalized: Vec<String> =
                annotators.iter().map(|a| normalize_answer(a)).collect();
            soft_score(&candidate, &normalized, variant)
        }
    }
}

/// Sidecar metadata stored next to a matrix CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixMeta {
    pub mode: ScoreMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub soft_variant: Option<SoftVariant>,
    pub question_types: BTreeMap<String, String>,
}

/// Model x question score matrix with canonical ordering.
///
/// Rows are models sorted by id; columns are questions sorted by id. Every
/// cell is a score in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyMatrix {
    pub model_ids: Vec<String>,
    pub question_ids: Vec<String>,
    /// Question type per column, parallel to `question_ids`.
    pub question_types: Vec<String>,
    /// scores[m][q] for model row m, question column q.
    pub scores: Vec<Vec<f64>>,
    pub mode: ScoreMode,
    pub soft_variant: Option<SoftVariant>,
}

impl AccuracyMatrix {
    pub fn num_models(&self) -> usize {
        self.model_ids.len()
    }

    pub fn num_questions(&self) -> usize {
        self.question_ids.len()
    }

    pub fn model_index(&self, model_id: &str) -> Option<usize> {
        self.model_ids.iter().position(|m| m == model_id)
    }

    /// Mean score of one model over all questions.
    pub fn model_accuracy(&self, model_idx: usize) -> f64 {
        let row = &self.scores[model_idx];
        row.iter().sum::<f64>() / row.len() as f64
    }

    /// Mean score of one model restricted to the given column subset.
    pub fn model_accuracy_on(&self, model_idx: usize, columns: &[usize]) -> f64 {
        if columns.is_empty() {
            return 0.0;
        }
        let row = &self.scores[model_idx];
        columns.iter().map(|&q| row[q]).sum::<f64>() / columns.len() as f64
    }

    /// Mean score per question type for one model.
    pub fn per_type_accuracy(&self, model_idx: usize) -> BTreeMap<String, f64> {
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        let row = &self.scores[model_idx];
        for (q, ty) in self.question_types.iter().enumerate() {
            let entry = sums.entry(ty.clone()).or_insert((0.0, 0));
            entry.0 += row[q];
            entry.1 += 1;
        }
        sums.into_iter()
            .map(|(ty, (sum, n))| (ty, sum / n as f64))
            .collect()
    }

    /// Column indices of questions with the given type.
    pub fn columns_of_type(&self, question_type: &str) -> Vec<usize> {
        self.question_types
            .iter()
            .enumerate()
            .filter(|(_, ty)| ty.as_str() == question_type)
            .map(|(q, _)| q)
            .collect()
    }

    /// Distinct question types in sorted order.
    pub fn distinct_types(&self) -> Vec<String> {
        let set: std::collections::BTreeSet<String> =
            self.question_types.iter().cloned().collect();
        set.into_iter().collect()
    }

    /// 0/1 correctness view at the given score threshold.
    pub fn correctness(&self, threshold: f64) -> CorrectnessView<'_> {
        CorrectnessView {
            matrix: self,
            threshold,
        }
    }
}

/// Boolean view of a matrix: correct iff score >= threshold.
#[derive(Debug, Clone, Copy)]
pub struct CorrectnessView<'a> {
    matrix: &'a AccuracyMatrix,
    pub threshold: f64,
}

impl CorrectnessView<'_> {
    pub fn is_correct(&self, model_idx: usize, question_idx: usize) -> bool {
        self.matrix.scores[model_idx][question_idx] >= self.threshold
    }

    pub fn any_correct(&self, question_idx: usize) -> bool {
        (0..self.matrix.num_models()).any(|m| self.is_correct(m, question_idx))
    }

    pub fn all_correct(&self, question_idx: usize) -> bool {
        (0..self.matrix.num_models()).all(|m| self.is_correct(m, question_idx))
    }
}

/// Default correctness threshold: a soft score of 0.5 means at least two
/// annotators agreed under leave-one-out, and exact scores are 0 or 1.
pub const DEFAULT_CORRECT_THRESHOLD: f64 = 0.5;

/// Builds the score matrix for a pool of prediction sets.
///
/// Every model must answer every labeled question; extra predictions for
/// unlabeled questions are ignored. Models are sorted by id, questions by
/// question id.
pub fn build_accuracy_matrix(
    predictions: &[PredictionSet],
    labels: &LabelSet,
    variant: SoftVariant,
) -> Result<AccuracyMatrix> {
    if labels.is_empty() {
        return Err(FamvoteError::validation("label set is empty"));
    }
    if predictions.is_empty() {
        return Err(FamvoteError::validation("no prediction sets given"));
    }
    let mut sorted: Vec<&PredictionSet> = predictions.iter().collect();
    sorted.sort_by(|a, b| a.model_id.cmp(&b.model_id));
    for pair in sorted.windows(2) {
        if pair[0].model_id == pair[1].model_id {
            return Err(FamvoteError::validation(format!(
                "duplicate model id `{}`",
                pair[0].model_id
            )));
        }
    }
    let question_ids: Vec<String> = labels.question_ids().map(|s| s.to_string()).collect();
    for set in &sorted {
        let mut missing = question_ids
            .iter()
            .filter(|qid| set.answer(qid).is_none());
        if let Some(first) = missing.next() {
            let more = missing.count();
            return Err(FamvoteError::validation(format!(
                "model `{}` has no answer for question `{first}`{}",
                set.model_id,
                if more > 0 {
                    format!(" (and {more} more)")
                } else {
                    String::new()
                }
            )));
        }
    }
    let question_types: Vec<String> = question_ids
        .iter()
        .map(|qid| labels.get(qid).unwrap().question_type.clone())
        .collect();
    // Columns are independent; rayon's collect preserves order, so the
    // result is identical at any thread count.
    let columns: Vec<Vec<f64>> = question_ids
        .par_iter()
        .map(|qid| {
            let record = labels.get(qid).unwrap();
            sorted
                .iter()
                .map(|set| score_answer(set.answer(qid).unwrap(), &record.answers, variant))
                .collect()
        })
        .collect();
    let num_models = sorted.len();
    let mut scores = vec![vec![0.0; question_ids.len()]; num_models];
    for (q, col) in columns.iter().enumerate() {
        for (m, &v) in col.iter().enumerate() {
            scores[m][q] = v;
        }
    }
    Ok(AccuracyMatrix {
        model_ids: sorted.iter().map(|s| s.model_id.clone()).collect(),
        question_ids,
        question_types,
        scores,
        mode: labels.mode,
        soft_variant: match labels.mode {
            ScoreMode::Soft => Some(variant),
            ScoreMode::Exact => None,
        },
    })
}

fn meta_path(path: &Path) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.push_str(".meta.json");
    path.with_file_name(name)
}

/// Saves a matrix as CSV plus a `.meta.json` sidecar.
///
/// The CSV header is `model_id` followed by question ids; each row is a
/// model id followed by its scores in shortest round-trip float notation.
pub fn save_accuracy_matrix(matrix: &AccuracyMatrix, path: &Path) -> Result<()> {
    let mut writer = csv::WriterBuilder::new()
        .from_path(path)
        .map_err(|e| FamvoteError::validation(format!("cannot write {path:?}: {e}")))?;
    let mut header = Vec::with_capacity(matrix.num_questions() + 1);
    header.push("model_id".to_string());
    header.extend(matrix.question_ids.iter().cloned());
    writer
        .write_record(&header)
        .map_err(|e| FamvoteError::validation(format!("csv write failed: {e}")))?;
    for (m, model_id) in matrix.model_ids.iter().enumerate() {
        let mut record = Vec::with_capacity(matrix.num_questions() + 1);
        record.push(model_id.clone());
        record.extend(matrix.scores[m].iter().map(|v| format!("{v}")));
        writer
            .write_record(&record)
            .map_err(|e| FamvoteError::validation(format!("csv write failed: {e}")))?;
    }
    writer
        .flush()
        .map_err(|source| FamvoteError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    let meta = MatrixMeta {
        mode: matrix.mode,
        soft_variant: matrix.soft_variant,
        question_types: matrix
            .question_ids
            .iter()
            .cloned()
            .zip(matrix.question_types.iter().cloned())
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&meta).expect("matrix meta serializes");
    text.push('\n');
    fs::write(meta_path(path), text).map_err(|source| FamvoteError::Io {
        path: meta_path(path),
        source,
    })?;
    Ok(())
}

/// Loads a matrix CSV and its `.meta.json` sidecar.
pub fn load_accuracy_matrix(path: &Path) -> Result<AccuracyMatrix> {
    let meta_file = meta_path(path);
    let meta_text = fs::read_to_string(&meta_file).map_err(|source| FamvoteError::Io {
        path: meta_file.clone(),
        source,
    })?;
    let meta: MatrixMeta = serde_json::from_str(&meta_text).map_err(|e| FamvoteError::Parse {
        path: meta_file.clone(),
        line: 0,
        message: e.to_string(),
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| FamvoteError::validation(format!("cannot read {path:?}: {e}")))?;
    let mut records = reader.records();
    let header = records
        .next()
        .ok_or_else(|| FamvoteError::validation(format!("matrix {path:?} is empty")))?
        .map_err(|e| FamvoteError::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: e.to_string(),
        })?;
    if header.get(0) != Some("model_id") {
        return Err(FamvoteError::validation(format!(
            "matrix {path:?}: first header field must be `model_id`"
        )));
    }
    let question_ids: Vec<String> = header.iter().skip(1).map(|s| s.to_string()).collect();
    let mut model_ids = Vec::new();
    let mut scores = Vec::new();
    for (idx, record) in records.enumerate() {
        let line_no = idx + 2;
        let record = record.map_err(|e| FamvoteError::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        if record.len() != question_ids.len() + 1 {
            return Err(FamvoteError::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: format!(
                    "expected {} fields, got {}",
                    question_ids.len() + 1,
                    record.len()
                ),
            });
        }
        model_ids.push(record.get(0).unwrap().to_string());
        let mut row = Vec::with_capacity(question_ids.len());
        for field in record.iter().skip(1) {
            let v: f64 = field.parse().map_err(|e| FamvoteError::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: format!("bad score `{field}`: {e}"),
            })?;
            if !(0.0..=1.0).contains(&v) {
                return Err(FamvoteError::validation(format!(
                    "score {v} out of [0, 1] at line {line_no} of {path:?}"
                )));
            }
            row.push(v);
        }
        scores.push(row);
    }
    let question_types: Vec<String> = question_ids
        .iter()
        .map(|qid| {
            meta.question_types.get(qid).cloned().ok_or_else(|| {
                FamvoteError::validation(format!(
                    "question `{qid}` missing from sidecar {meta_file:?}"
                ))
            })
        })
        .collect::<Result<_>>()?;
    Ok(AccuracyMatrix {
        model_ids,
        question_ids,
        question_types,
        scores,
        mode: meta.mode,
        soft_variant: meta.soft_variant,
    })
}

/// Prediction pool joined with its matrix: normalized answers plus scores.
///
/// Everything downstream of scoring (votes, candidate features, analysis)
/// reads from this. A candidate answer's score is recovered from any
/// supporting model's matrix cell, so labels are not needed again after
/// the matrix is built.
#[derive(Debug, Clone)]
pub struct EnsembleContext {
    pub matrix: AccuracyMatrix,
    /// answers[m][q]: normalized answer of model m on question q.
    pub answers: Vec<Vec<String>>,
}

impl EnsembleContext {
    /// Joins prediction sets with an already-built matrix.
    pub fn from_parts(predictions: &[PredictionSet], matrix: AccuracyMatrix) -> Result<Self> {
        let mut by_id: BTreeMap<&str, &PredictionSet> = BTreeMap::new();
        for set in predictions {
            if by_id.insert(set.model_id.as_str(), set).is_some() {
                return Err(FamvoteError::validation(format!(
                    "duplicate model id `{}`",
                    set.model_id
                )));
            }
        }
        let mut answers = Vec::with_capacity(matrix.num_models());
        for model_id in &matrix.model_ids {
            let set = by_id.get(model_id.as_str()).ok_or_else(|| {
                FamvoteError::validation(format!(
                    "matrix row `{model_id}` has no matching prediction set"
                ))
            })?;
            let row: Vec<String> = matrix
                .question_ids
                .iter()
                .map(|qid| {
                    set.answer(qid)
                        .map(normalize_answer)
                        .ok_or_else(|| {
                            FamvoteError::validation(format!(
                                "model `{model_id}` has no answer for question `{qid}`"
                            ))
                        })
                })
                .collect::<Result<_>>()?;
            answers.push(row);
        }
        Ok(EnsembleContext { matrix, answers })
    }

    /// Builds the matrix from labels, then joins.
    pub fn build(
        predictions: &[PredictionSet],
        labels: &LabelSet,
        variant: SoftVariant,
    ) -> Result<Self> {
        let matrix = build_accuracy_matrix(predictions, labels, variant)?;
        EnsembleContext::from_parts(predictions, matrix)
    }

    pub fn num_models(&self) -> usize {
        self.matrix.num_models()
    }

    pub fn num_questions(&self) -> usize {
        self.matrix.num_questions()
    }

    /// Score of a normalized candidate answer on one question, read off any
    /// supporting model's matrix cell. None when no model gave that answer.
    pub fn answer_score(&self, question_idx: usize, candidate_norm: &str) -> Option<f64> {
        (0..self.num_models())
            .find(|&m| self.answers[m][question_idx] == candidate_norm)
            .map(|m| self.matrix.scores[m][question_idx])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::LabelRecord;
    use proptest::prelude::*;

    #[test]
    fn normalize_basic_pipeline() {
        assert_eq!(normalize_answer("The  Cat!"), "cat");
        assert_eq!(normalize_answer("A one"), "1");
        assert_eq!(normalize_answer("  YES "), "yes");
        assert_eq!(normalize_answer("right-hand"), "righthand");
        assert_eq!(normalize_answer("don't"), "dont");
        assert_eq!(normalize_answer("TWO"), "2");
        assert_eq!(normalize_answer("ten"), "10");
    }

    #[test]
    fn normalize_keeps_punctuation_between_digits() {
        assert_eq!(normalize_answer("1,000"), "1,000");
        assert_eq!(normalize_answer("3.5"), "3.5");
        assert_eq!(normalize_answer("1, 2"), "1 2");
    }

    #[test]
    fn normalize_drops_leading_articles_only() {
        assert_eq!(normalize_answer("the answer"), "answer");
        assert_eq!(normalize_answer("the the"), "");
        assert_eq!(normalize_answer("at the top"), "at the top");
    }

    #[test]
    fn soft_score_three_of_ten_is_point_nine() {
        let mut annotators = vec!["no".to_string(); 10];
        for a in annotators.iter_mut().take(3) {
            *a = "yes".to_string();
        }
        let loo = soft_score("yes", &annotators, SoftVariant::LeaveOneOut);
        assert!((loo - 0.9).abs() < 1e-12, "got {loo}");
        let simple = soft_score("yes", &annotators, SoftVariant::Simple);
        assert!((simple - 1.0).abs() < 1e-12, "got {simple}");
    }

    #[test]
    fn soft_score_single_match() {
        let mut annotators = vec!["no".to_string(); 10];
        annotators[0] = "yes".to_string();
        let loo = soft_score("yes", &annotators, SoftVariant::LeaveOneOut);
        assert!((loo - 0.3).abs() < 1e-12, "got {loo}");
        let simple = soft_score("yes", &annotators, SoftVariant::Simple);
        assert!((simple - 1.0 / 3.0).abs() < 1e-12, "got {simple}");
    }

    #[test]
    fn soft_score_unanimous_is_one() {
        let annotators = vec!["4".to_string(); 10];
        assert_eq!(soft_score("4", &annotators, SoftVariant::LeaveOneOut), 1.0);
        assert_eq!(soft_score("4", &annotators, SoftVariant::Simple), 1.0);
        assert_eq!(soft_score("5", &annotators, SoftVariant::LeaveOneOut), 0.0);
    }

    #[test]
    fn exact_scoring_normalizes_both_sides() {
        let answers = LabelAnswers::Exact("The left".to_string());
        assert_eq!(score_answer("LEFT", &answers, SoftVariant::LeaveOneOut), 1.0);
        assert_eq!(score_answer("right", &answers, SoftVariant::LeaveOneOut), 0.0);
    }

    fn tiny_pool() -> (Vec<PredictionSet>, LabelSet) {
        let mut e1 = BTreeMap::new();
        e1.insert("q1".to_string(), "yes".to_string());
        e1.insert("q2".to_string(), "two".to_string());
        let mut e2 = BTreeMap::new();
        e2.insert("q1".to_string(), "no".to_string());
        e2.insert("q2".to_string(), "2".to_string());
        let preds = vec![
            PredictionSet::new("m2", e2),
            PredictionSet::new("m1", e1),
        ];
        let mut entries = BTreeMap::new();
        entries.insert(
            "q1".to_string(),
            LabelRecord {
                answers: LabelAnswers::Exact("yes".to_string()),
                question_type: "yesno".to_string(),
            },
        );
        entries.insert(
            "q2".to_string(),
            LabelRecord {
                answers: LabelAnswers::Exact("2".to_string()),
                question_type: "number".to_string(),
            },
        );
        let labels = LabelSet::new(ScoreMode::Exact, entries).unwrap();
        (preds, labels)
    }

    #[test]
    fn matrix_sorts_models_and_questions() {
        let (preds, labels) = tiny_pool();
        let matrix = build_accuracy_matrix(&preds, &labels, SoftVariant::LeaveOneOut).unwrap();
        assert_eq!(matrix.model_ids, vec!["m1", "m2"]);
        assert_eq!(matrix.question_ids, vec!["q1", "q2"]);
        assert_eq!(matrix.scores[0], vec![1.0, 1.0]);
        assert_eq!(matrix.scores[1], vec![0.0, 1.0]);
        assert_eq!(matrix.model_accuracy(0), 1.0);
        assert_eq!(matrix.model_accuracy(1), 0.5);
        let per_type = matrix.per_type_accuracy(1);
        assert_eq!(per_type["yesno"], 0.0);
        assert_eq!(per_type["number"], 1.0);
    }

    #[test]
    fn matrix_reports_missing_answer() {
        let (mut preds, labels) = tiny_pool();
        preds.pop();
        let mut partial = BTreeMap::new();
        partial.insert("q1".to_string(), "yes".to_string());
        preds.push(PredictionSet::new("m1", partial));
        let err = build_accuracy_matrix(&preds, &labels, SoftVariant::LeaveOneOut).unwrap_err();
        assert!(err.to_string().contains("m1"), "{err}");
        assert!(err.to_string().contains("q2"), "{err}");
    }

    #[test]
    fn matrix_round_trips_through_csv() {
        let (preds, labels) = tiny_pool();
        let matrix = build_accuracy_matrix(&preds, &labels, SoftVariant::LeaveOneOut).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("matrix.csv");
        save_accuracy_matrix(&matrix, &p1).unwrap();
        let loaded = load_accuracy_matrix(&p1).unwrap();
        assert_eq!(loaded, matrix);
        let p2 = dir.path().join("matrix2.csv");
        save_accuracy_matrix(&loaded, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn context_recovers_candidate_scores_from_supporters() {
        let (preds, labels) = tiny_pool();
        let ctx = EnsembleContext::build(&preds, &labels, SoftVariant::LeaveOneOut).unwrap();
        assert_eq!(ctx.answer_score(0, "yes"), Some(1.0));
        assert_eq!(ctx.answer_score(0, "no"), Some(0.0));
        assert_eq!(ctx.answer_score(0, "maybe"), None);
        // q2: "two" normalizes to "2", both models agree.
        assert_eq!(ctx.answer_score(1, "2"), Some(1.0));
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in "\\PC{0,40}") {
            let once = normalize_answer(&s);
            let twice = normalize_answer(&once);
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn leave_one_out_never_exceeds_simple(n in 0usize..=10) {
            let mut annotators = vec!["other".to_string(); 10];
            for a in annotators.iter_mut().take(n) {
                *a = "hit".to_string();
            }
            let loo = soft_score("hit", &annotators, SoftVariant::LeaveOneOut);
            let simple = soft_score("hit", &annotators, SoftVariant::Simple);
            prop_assert!(loo <= simple + 1e-12);
            prop_assert!((0.0..=1.0).contains(&loo));
            prop_assert!((0.0..=1.0).contains(&simple));
        }
    }
}
