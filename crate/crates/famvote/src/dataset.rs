//! Prediction dumps, label sets, family maps: loading, validation, persistence.
//!
//! File formats:
//! - predictions: JSONL, one `{"question_id": ..., "answer": ...}` per line;
//! - labels: JSONL, one record per line with `question_id`, `question_type`
//!   and either `annotator_answers` (array of 10 strings, soft mode) or
//!   `gold_answer` (string, exact mode);
//! - family map: TOML with an `[assignment]` table mapping model id to
//!   family id, plus an optional top-level `families` array pinning family
//!   order.
//!
//! Loaded objects are immutable; loading the same file twice yields
//! structurally equal values. Saving what we loaded reproduces canonical
//! files byte for byte (entries sorted by question id, fixed key order).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FamvoteError, Result};

/// Scoring regime of a label set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    /// 10 annotator answers per question, partial credit.
    Soft,
    /// Single gold answer, 0/1 credit.
    Exact,
}

impl std::fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScoreMode::Soft => write!(f, "soft"),
            ScoreMode::Exact => write!(f, "exact"),
        }
    }
}

impl std::str::FromStr for ScoreMode {
    type Err = FamvoteError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "soft" => Ok(ScoreMode::Soft),
            "exact" => Ok(ScoreMode::Exact),
            other => Err(FamvoteError::usage(format!(
                "unknown score mode `{other}` (expected `soft` or `exact`)"
            ))),
        }
    }
}

/// Per-model metadata with cached (derived) accuracies.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelMeta {
    pub model_id: String,
    pub family_id: String,
    #[serde(default)]
    pub display_size: String,
    pub overall_accuracy: f64,
    pub per_type_accuracy: BTreeMap<String, f64>,
}

/// One model's raw answers keyed by question id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionSet {
    pub model_id: String,
    entries: BTreeMap<String, String>,
}

impl PredictionSet {
    pub fn new(model_id: impl Into<String>, entries: BTreeMap<String, String>) -> Self {
        PredictionSet {
            model_id: model_id.into(),
            entries,
        }
    }

    pub fn answer(&self, question_id: &str) -> Option<&str> {
        self.entries.get(question_id).map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn question_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionRecord {
    question_id: String,
    answer: String,
}

/// Ground-truth answers for one question.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelAnswers {
    /// Exactly 10 annotator answers.
    Soft(Vec<String>),
    Exact(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelRecord {
    pub answers: LabelAnswers,
    pub question_type: String,
}

/// Per-question ground truth plus question types; mode is uniform.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    pub mode: ScoreMode,
    entries: BTreeMap<String, LabelRecord>,
}

impl LabelSet {
    pub fn new(mode: ScoreMode, entries: BTreeMap<String, LabelRecord>) -> Result<Self> {
        for (qid, rec) in &entries {
            match (mode, &rec.answers) {
                (ScoreMode::Soft, LabelAnswers::Soft(a)) => {
                    if a.len() != 10 {
                        return Err(FamvoteError::validation(format!(
                            "question {qid}: soft mode requires exactly 10 annotator answers, got {}",
                            a.len()
                        )));
                    }
                }
                (ScoreMode::Exact, LabelAnswers::Exact(_)) => {}
                _ => {
                    return Err(FamvoteError::validation(format!(
                        "question {qid}: answers do not match {mode} mode"
                    )))
                }
            }
        }
        Ok(LabelSet { mode, entries })
    }

    pub fn get(&self, question_id: &str) -> Option<&LabelRecord> {
        self.entries.get(question_id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Question ids in canonical (sorted) order.
    pub fn question_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &LabelRecord)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelLine {
    question_id: String,
    question_type: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    annotator_answers: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gold_answer: Option<String>,
}

/// Assignment of every model to exactly one family.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FamilyPartition {
    assignment: BTreeMap<String, String>,
    /// Family ids in canonical order, each with its sorted member list.
    families: Vec<(String, Vec<String>)>,
}

impl FamilyPartition {
    /// Builds a partition from a model → family map, keeping only `models`.
    ///
    /// `family_order`, when given, pins the family ordering and must cover
    /// every family that survives filtering; listed families that end up
    /// empty are an error. Without it, families are ordered by id.
    pub fn from_assignment(
        assignment: &BTreeMap<String, String>,
        models: &[String],
        family_order: Option<&[String]>,
    ) -> Result<Self> {
        let mut kept: BTreeMap<String, String> = BTreeMap::new();
        for model in models {
            match assignment.get(model) {
                Some(fam) => {
                    kept.insert(model.clone(), fam.clone());
                }
                None => {
                    return Err(FamvoteError::validation(format!(
                        "model `{model}` has no family assignment"
                    )))
                }
            }
        }
        let mut by_family: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (model, fam) in &kept {
            by_family.entry(fam.clone()).or_default().push(model.clone());
        }
        let families: Vec<(String, Vec<String>)> = match family_order {
            Some(order) => {
                let mut seen = BTreeSet::new();
                let mut out = Vec::with_capacity(order.len());
                for fam in order {
                    if !seen.insert(fam.clone()) {
                        return Err(FamvoteError::validation(format!(
                            "family `{fam}` listed twice in family order"
                        )));
                    }
                    match by_family.remove(fam) {
                        Some(members) => out.push((fam.clone(), members)),
                        None => {
                            return Err(FamvoteError::validation(format!(
                                "family `{fam}` is empty after filtering to the model pool"
                            )))
                        }
                    }
                }
                if let Some((fam, _)) = by_family.iter().next() {
                    return Err(FamvoteError::validation(format!(
                        "family `{fam}` is assigned but missing from the family order list"
                    )));
                }
                out
            }
            None => by_family.into_iter().collect(),
        };
        Ok(FamilyPartition {
            assignment: kept,
            families,
        })
    }

    /// Every model its own family (family id = model id).
    pub fn singletons(models: &[String]) -> Self {
        let assignment: BTreeMap<String, String> =
            models.iter().map(|m| (m.clone(), m.clone())).collect();
        let families = assignment
            .iter()
            .map(|(m, f)| (f.clone(), vec![m.clone()]))
            .collect();
        FamilyPartition {
            assignment,
            families,
        }
    }

    /// All models in one family.
    pub fn merged(models: &[String], family_id: impl Into<String>) -> Self {
        let family_id = family_id.into();
        let mut members: Vec<String> = models.to_vec();
        members.sort();
        let assignment = members
            .iter()
            .map(|m| (m.clone(), family_id.clone()))
            .collect();
        FamilyPartition {
            assignment,
            families: vec![(family_id, members)],
        }
    }

    pub fn family_of(&self, model_id: &str) -> Option<&str> {
        self.assignment.get(model_id).map(|s| s.as_str())
    }

    /// Families in canonical order with sorted member lists.
    pub fn families(&self) -> &[(String, Vec<String>)] {
        &self.families
    }

    pub fn num_families(&self) -> usize {
        self.families.len()
    }

    pub fn assignment(&self) -> &BTreeMap<String, String> {
        &self.assignment
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct FamilyMapFile {
    #[serde(skip_serializing_if = "Option::is_none")]
    families: Option<Vec<String>>,
    assignment: BTreeMap<String, String>,
}

fn open_reader(path: &Path) -> Result<BufReader<fs::File>> {
    let file = fs::File::open(path).map_err(|source| FamvoteError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(BufReader::new(file))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|source| FamvoteError::Io {
                path: parent.to_path_buf(),
                source,
            })?;
        }
    }
    let mut file = fs::File::create(path).map_err(|source| FamvoteError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    file.write_all(bytes).map_err(|source| FamvoteError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(())
}

/// Loads a line-delimited prediction dump. The model id is taken from the
/// file stem unless `model_id` overrides it.
pub fn load_predictions(path: &Path, model_id: Option<&str>) -> Result<PredictionSet> {
    let model_id = match model_id {
        Some(id) => id.to_string(),
        None => path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .ok_or_else(|| FamvoteError::usage(format!("cannot derive model id from {path:?}")))?,
    };
    let reader = open_reader(path)?;
    let mut entries = BTreeMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| FamvoteError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PredictionRecord =
            serde_json::from_str(&line).map_err(|e| FamvoteError::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: e.to_string(),
            })?;
        if entries.insert(record.question_id.clone(), record.answer).is_some() {
            return Err(FamvoteError::validation(format!(
                "duplicate question_id `{}` in {path:?} (line {line_no})",
                record.question_id
            )));
        }
    }
    Ok(PredictionSet { model_id, entries })
}

/// Saves a prediction set in canonical JSONL (sorted by question id).
pub fn save_predictions(set: &PredictionSet, path: &Path) -> Result<()> {
    let mut out = String::new();
    for (qid, answer) in &set.entries {
        let rec = PredictionRecord {
            question_id: qid.clone(),
            answer: answer.clone(),
        };
        out.push_str(&serde_json::to_string(&rec).expect("prediction record serializes"));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Loads a line-delimited label file in the given mode.
pub fn load_labels(path: &Path, mode: ScoreMode) -> Result<LabelSet> {
    let reader = open_reader(path)?;
    let mut entries = BTreeMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| FamvoteError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: LabelLine = serde_json::from_str(&line).map_err(|e| FamvoteError::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        let answers = match mode {
            ScoreMode::Soft => {
                let answers = record.annotator_answers.ok_or_else(|| FamvoteError::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    message: "soft mode requires `annotator_answers`".to_string(),
                })?;
                if answers.len() != 10 {
                    return Err(FamvoteError::validation(format!(
                        "question {} (line {line_no}): expected 10 annotator answers, got {}",
                        record.question_id,
                        answers.len()
                    )));
                }
                LabelAnswers::Soft(answers)
            }
            ScoreMode::Exact => {
                let gold = record.gold_answer.ok_or_else(|| FamvoteError::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    message: "exact mode requires `gold_answer`".to_string(),
                })?;
                LabelAnswers::Exact(gold)
            }
        };
        let rec = LabelRecord {
            answers,
            question_type: record.question_type,
        };
        if entries.insert(record.question_id.clone(), rec).is_some() {
            return Err(FamvoteError::validation(format!(
                "duplicate question_id `{}` in {path:?} (line {line_no})",
                record.question_id
            )));
        }
    }
    LabelSet::new(mode, entries)
}

/// Saves a label set in canonical JSONL (sorted by question id).
pub fn save_labels(labels: &LabelSet, path: &Path) -> Result<()> {
    let mut out = String::new();
    for (qid, rec) in &labels.entries {
        let line = match &rec.answers {
            LabelAnswers::Soft(answers) => LabelLine {
                question_id: qid.clone(),
                question_type: rec.question_type.clone(),
                annotator_answers: Some(answers.clone()),
                gold_answer: None,
            },
            LabelAnswers::Exact(gold) => LabelLine {
                question_id: qid.clone(),
                question_type: rec.question_type.clone(),
                annotator_answers: None,
                gold_answer: Some(gold.clone()),
            },
        };
        out.push_str(&serde_json::to_string(&line).expect("label record serializes"));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Loads a family map and validates it against the model pool.
pub fn load_family_partition(path: &Path, models: &[String]) -> Result<FamilyPartition> {
    let text = fs::read_to_string(path).map_err(|source| FamvoteError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let file: FamilyMapFile = toml::from_str(&text).map_err(|e| FamvoteError::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })?;
    FamilyPartition::from_assignment(&file.assignment, models, file.families.as_deref())
}

/// Saves a family partition as canonical TOML.
pub fn save_family_partition(partition: &FamilyPartition, path: &Path) -> Result<()> {
    let file = FamilyMapFile {
        families: Some(
            partition
                .families
                .iter()
                .map(|(fam, _)| fam.clone())
                .collect(),
        ),
        assignment: partition.assignment.clone(),
    };
    let text = toml::to_string(&file).expect("family map serializes");
    write_atomic(path, text.as_bytes())
}

/// Saves model metadata as a JSON document.
pub fn save_model_meta(meta: &[ModelMeta], path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(meta).expect("model meta serializes");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn load_model_meta(path: &Path) -> Result<Vec<ModelMeta>> {
    let text = fs::read_to_string(path).map_err(|source| FamvoteError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| FamvoteError::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn write(path: &Path, content: &str) {
        fs::write(path, content).unwrap();
    }

    #[test]
    fn load_predictions_parses_records() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("modelA.jsonl");
        write(
            &path,
            "{\"question_id\":\"q1\",\"answer\":\"yes\"}\n{\"question_id\":\"q2\",\"answer\":\"no\"}\n",
        );
        let set = load_predictions(&path, None).unwrap();
        assert_eq!(set.model_id, "modelA");
        assert_eq!(set.answer("q1"), Some("yes"));
        assert_eq!(set.len(), 2);
    }

    #[test]
    fn duplicate_question_id_is_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        write(
            &path,
            "{\"question_id\":\"q1\",\"answer\":\"a\"}\n{\"question_id\":\"q1\",\"answer\":\"b\"}\n",
        );
        let err = load_predictions(&path, None).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn missing_answer_field_names_line() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        write(
            &path,
            "{\"question_id\":\"q1\",\"answer\":\"a\"}\n{\"question_id\":\"q2\"}\n",
        );
        let err = load_predictions(&path, None).unwrap_err();
        match err {
            FamvoteError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn soft_labels_require_ten_annotators() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("labels.jsonl");
        let nine: Vec<String> = (0..9).map(|_| "x".to_string()).collect();
        write(
            &path,
            &format!(
                "{}\n",
                serde_json::json!({"question_id":"q1","question_type":"other","annotator_answers":nine})
            ),
        );
        let err = load_labels(&path, ScoreMode::Soft).unwrap_err();
        assert!(err.to_string().contains("10 annotator"), "{err}");
    }

    #[test]
    fn exact_labels_load() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("labels.jsonl");
        write(
            &path,
            "{\"question_id\":\"q1\",\"question_type\":\"query\",\"gold_answer\":\"left\"}\n",
        );
        let set = load_labels(&path, ScoreMode::Exact).unwrap();
        assert_eq!(set.len(), 1);
        let rec = set.get("q1").unwrap();
        assert_eq!(rec.question_type, "query");
        assert_eq!(rec.answers, LabelAnswers::Exact("left".to_string()));
    }

    #[test]
    fn family_partition_reports_missing_model() {
        let mut assignment = BTreeMap::new();
        assignment.insert("m1".to_string(), "famA".to_string());
        let models = vec!["m1".to_string(), "m2".to_string()];
        let err = FamilyPartition::from_assignment(&assignment, &models, None).unwrap_err();
        assert!(err.to_string().contains("m2"), "{err}");
    }

    #[test]
    fn family_partition_rejects_empty_listed_family() {
        let mut assignment = BTreeMap::new();
        assignment.insert("m1".to_string(), "famA".to_string());
        let models = vec!["m1".to_string()];
        let order = vec!["famA".to_string(), "famB".to_string()];
        let err = FamilyPartition::from_assignment(&assignment, &models, Some(&order)).unwrap_err();
        assert!(err.to_string().contains("famB"), "{err}");
    }

    #[test]
    fn singleton_partition_has_one_family_per_model() {
        let models = vec!["b".to_string(), "a".to_string()];
        let part = FamilyPartition::singletons(&models);
        assert_eq!(part.num_families(), 2);
        assert_eq!(part.family_of("a"), Some("a"));
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempdir().unwrap();
        let mut entries = BTreeMap::new();
        entries.insert("q2".to_string(), "two".to_string());
        entries.insert("q1".to_string(), "one, with comma".to_string());
        let set = PredictionSet::new("m", entries);
        let p1 = dir.path().join("a.jsonl");
        save_predictions(&set, &p1).unwrap();
        let loaded = load_predictions(&p1, Some("m")).unwrap();
        assert_eq!(loaded, set);
        let p2 = dir.path().join("b.jsonl");
        save_predictions(&loaded, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());

        let part = FamilyPartition::singletons(&["x".to_string(), "y".to_string()]);
        let f1 = dir.path().join("fam.toml");
        save_family_partition(&part, &f1).unwrap();
        let loaded = load_family_partition(&f1, &["x".to_string(), "y".to_string()]).unwrap();
        assert_eq!(loaded, part);
        let f2 = dir.path().join("fam2.toml");
        save_family_partition(&loaded, &f2).unwrap();
        assert_eq!(fs::read(&f1).unwrap(), fs::read(&f2).unwrap());
    }
}
