//! Comparative-text datasets: loading, validation, statistics and few-shot
//! exemplar selection.
//!
//! Two on-disk layouts are accepted, both carrying the columns
//! `id,text,alternative_a,alternative_b,label`:
//!
//! * a delimited table with a header row, and
//! * record lines, one JSON object per line.
//!
//! Gold labels are kept in their raw four-way form here; they are only
//! collapsed to three classes at evaluation time.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backend::TokenEstimator;
use crate::label::{EvalClass, PreferenceLabel};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("i/o error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("schema error: missing required field `{field}`{}", row.map(|r| format!(" on row {r}")).unwrap_or_default())]
    Schema { field: String, row: Option<usize> },
    #[error("malformed row {row}: {message}")]
    Malformed { row: usize, message: String },
    #[error("label error on row {row} (id {id:?}): {label:?} is not a label of dataset `{tag}`")]
    Label {
        row: usize,
        id: String,
        label: String,
        tag: String,
    },
    #[error("duplicate instance id {id:?} on row {row}")]
    DuplicateId { id: String, row: usize },
    #[error("invalid instance {id:?}: {message}")]
    InvalidInstance { id: String, message: String },
    #[error("no instance carries label {0}")]
    Coverage(PreferenceLabel),
    #[error("few-shot instance {0:?} is not part of the dataset")]
    Consistency(String),
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

/// On-disk dataset layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetFormat {
    DelimitedTable,
    RecordLines,
}

impl DatasetFormat {
    /// Guess from the file extension: `.jsonl`/`.ndjson` are record lines,
    /// anything else is a table.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("ndjson") => DatasetFormat::RecordLines,
            _ => DatasetFormat::DelimitedTable,
        }
    }
}

impl FromStr for DatasetFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "delimited-table" | "csv" | "table" => Ok(DatasetFormat::DelimitedTable),
            "record-lines" | "jsonl" => Ok(DatasetFormat::RecordLines),
            other => Err(format!("unknown dataset format {other:?}")),
        }
    }
}

pub const COLLEGE_CONFIDENTIAL: &str = "college_confidential";
pub const COMPSENT19: &str = "compsent19";

/// Raw labels a dataset tag may carry. Compsent-19 has no "equal" class;
/// every other tag, including user-defined ones, accepts all four.
pub fn label_vocabulary(tag: &str) -> &'static [PreferenceLabel] {
    const THREE: [PreferenceLabel; 3] = [
        PreferenceLabel::APreferred,
        PreferenceLabel::BPreferred,
        PreferenceLabel::NoPreference,
    ];
    match tag {
        COMPSENT19 => &THREE,
        _ => &PreferenceLabel::ALL,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparisonInstance {
    pub id: String,
    pub text: String,
    pub alternative_a: String,
    pub alternative_b: String,
    pub gold_label: Option<PreferenceLabel>,
    pub dataset_tag: String,
}

impl ComparisonInstance {
    pub fn new(
        id: impl Into<String>,
        text: impl Into<String>,
        alternative_a: impl Into<String>,
        alternative_b: impl Into<String>,
        gold_label: Option<PreferenceLabel>,
    ) -> Self {
        ComparisonInstance {
            id: id.into(),
            text: text.into(),
            alternative_a: alternative_a.into(),
            alternative_b: alternative_b.into(),
            gold_label,
            dataset_tag: String::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |message: &str| CorpusError::InvalidInstance {
            id: self.id.clone(),
            message: message.to_string(),
        };
        if self.id.trim().is_empty() {
            return Err(invalid("empty id"));
        }
        if self.text.trim().is_empty() {
            return Err(invalid("text is empty"));
        }
        if self.alternative_a.trim() == self.alternative_b.trim() {
            return Err(invalid("alternatives A and B are identical"));
        }
        Ok(())
    }

    /// Number of maximal non-whitespace runs in the text.
    pub fn word_count(&self) -> usize {
        word_count(&self.text)
    }
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub tag: String,
    instances: Vec<ComparisonInstance>,
}

impl Dataset {
    /// Build a validated dataset. Instance tags are overwritten with `tag`.
    pub fn new(tag: impl Into<String>, instances: Vec<ComparisonInstance>) -> Result<Self> {
        let tag = tag.into();
        let vocab = label_vocabulary(&tag);
        let mut seen = HashSet::with_capacity(instances.len());
        let mut instances = instances;
        for (i, inst) in instances.iter_mut().enumerate() {
            let row = i + 1;
            inst.dataset_tag = tag.clone();
            inst.validate()?;
            if let Some(label) = inst.gold_label {
                if !vocab.contains(&label) {
                    return Err(CorpusError::Label {
                        row,
                        id: inst.id.clone(),
                        label: label.as_str().to_string(),
                        tag: tag.clone(),
                    });
                }
            }
            if !seen.insert(inst.id.clone()) {
                return Err(CorpusError::DuplicateId {
                    id: inst.id.clone(),
                    row,
                });
            }
        }
        Ok(Dataset { tag, instances })
    }

    pub fn instances(&self) -> &[ComparisonInstance] {
        &self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ComparisonInstance> {
        self.instances.iter().find(|i| i.id == id)
    }

    pub fn vocabulary(&self) -> &'static [PreferenceLabel] {
        label_vocabulary(&self.tag)
    }

    /// Gold evaluation classes keyed by instance id; unlabeled instances are skipped.
    pub fn golds(&self) -> BTreeMap<String, EvalClass> {
        self.instances
            .iter()
            .filter_map(|i| i.gold_label.map(|l| (i.id.clone(), l.to_eval_class())))
            .collect()
    }
}

#[derive(Debug, Deserialize)]
struct RawRecord {
    id: Option<String>,
    text: Option<String>,
    alternative_a: Option<String>,
    alternative_b: Option<String>,
    label: Option<String>,
}

const REQUIRED_COLUMNS: [&str; 5] = ["id", "text", "alternative_a", "alternative_b", "label"];

fn require(field: &str, value: Option<String>, row: usize) -> Result<String> {
    value.ok_or_else(|| CorpusError::Schema {
        field: field.to_string(),
        row: Some(row),
    })
}

fn instance_from_record(raw: RawRecord, row: usize, tag: &str) -> Result<ComparisonInstance> {
    let id = require("id", raw.id, row)?;
    let text = require("text", raw.text, row)?;
    let alternative_a = require("alternative_a", raw.alternative_a, row)?;
    let alternative_b = require("alternative_b", raw.alternative_b, row)?;
    let label = require("label", raw.label, row)?;
    let gold_label = match label.trim() {
        "" => None,
        s => {
            let parsed = s.parse::<PreferenceLabel>().ok();
            match parsed {
                Some(l) if label_vocabulary(tag).contains(&l) => Some(l),
                _ => {
                    return Err(CorpusError::Label {
                        row,
                        id,
                        label: s.to_string(),
                        tag: tag.to_string(),
                    })
                }
            }
        }
    };
    Ok(ComparisonInstance {
        id,
        text,
        alternative_a,
        alternative_b,
        gold_label,
        dataset_tag: tag.to_string(),
    })
}

/// Read a dataset file. Row numbers in errors are 1-based data rows (the
/// header row of a table is not counted).
pub fn load_dataset(path: &Path, format: DatasetFormat, tag: &str) -> Result<Dataset> {
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    match format {
        DatasetFormat::DelimitedTable => read_table(file, tag),
        DatasetFormat::RecordLines => read_record_lines(BufReader::new(file), tag),
    }
}

pub fn read_table<R: Read>(reader: R, tag: &str) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers().map_err(|e| CorpusError::Malformed {
        row: 0,
        message: e.to_string(),
    })?;
    for col in REQUIRED_COLUMNS {
        if !headers.iter().any(|h| h.trim() == col) {
            return Err(CorpusError::Schema {
                field: col.to_string(),
                row: None,
            });
        }
    }
    let mut instances = Vec::new();
    for (i, record) in rdr.deserialize::<RawRecord>().enumerate() {
        let row = i + 1;
        let raw = record.map_err(|e| CorpusError::Malformed {
            row,
            message: e.to_string(),
        })?;
        instances.push(instance_from_record(raw, row, tag)?);
    }
    Dataset::new(tag, instances)
}

pub fn read_record_lines<R: BufRead>(reader: R, tag: &str) -> Result<Dataset> {
    let mut instances = Vec::new();
    let mut row = 0;
    for line in reader.lines() {
        let line = line.map_err(|source| CorpusError::Io {
            path: "<record lines>".to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        row += 1;
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            row,
            message: e.to_string(),
        })?;
        instances.push(instance_from_record(raw, row, tag)?);
    }
    Dataset::new(tag, instances)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub counts: BTreeMap<EvalClass, usize>,
    /// Number of labeled instances; equals the sum of `counts`.
    pub total: usize,
    pub unlabeled: usize,
    pub avg_token_length: f64,
}

impl DatasetStats {
    pub fn count(&self, class: EvalClass) -> usize {
        self.counts.get(&class).copied().unwrap_or(0)
    }
}

pub fn dataset_stats(d: &Dataset, estimator: &dyn TokenEstimator) -> DatasetStats {
    let per_instance = |inst: &ComparisonInstance| -> ([usize; 3], usize, usize) {
        let mut c = [0usize; 3];
        let mut unlabeled = 0;
        match inst.gold_label {
            Some(l) => c[l.to_eval_class().index()] += 1,
            None => unlabeled += 1,
        }
        (c, unlabeled, estimator.estimate(&inst.text))
    };
    let merge = |a: ([usize; 3], usize, usize), b: ([usize; 3], usize, usize)| {
        (
            [a.0[0] + b.0[0], a.0[1] + b.0[1], a.0[2] + b.0[2]],
            a.1 + b.1,
            a.2 + b.2,
        )
    };
    let zero = ([0usize; 3], 0usize, 0usize);

    #[cfg(feature = "parallel")]
    let (class_counts, unlabeled, tokens) = {
        use rayon::prelude::*;
        d.instances.par_iter().map(per_instance).reduce(|| zero, merge)
    };
    #[cfg(not(feature = "parallel"))]
    let (class_counts, unlabeled, tokens) = d.instances.iter().map(per_instance).fold(zero, merge);

    let counts: BTreeMap<EvalClass, usize> = EvalClass::ALL
        .iter()
        .map(|c| (*c, class_counts[c.index()]))
        .collect();
    let avg_token_length = if d.is_empty() {
        0.0
    } else {
        tokens as f64 / d.len() as f64
    };
    DatasetStats {
        total: class_counts.iter().sum(),
        counts,
        unlabeled,
        avg_token_length,
    }
}

/// One exemplar per raw label of the dataset's vocabulary.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FewShotSet {
    exemplars: BTreeMap<PreferenceLabel, ComparisonInstance>,
}

impl FewShotSet {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Build from explicit exemplars; each instance's gold label is its key.
    pub fn from_instances(instances: Vec<ComparisonInstance>) -> Result<Self> {
        let mut exemplars = BTreeMap::new();
        let mut ids = HashSet::new();
        for inst in instances {
            let label = inst.gold_label.ok_or_else(|| CorpusError::InvalidInstance {
                id: inst.id.clone(),
                message: "few-shot exemplar has no gold label".to_string(),
            })?;
            if !ids.insert(inst.id.clone()) {
                return Err(CorpusError::DuplicateId { id: inst.id, row: 0 });
            }
            if exemplars.insert(label, inst).is_some() {
                return Err(CorpusError::InvalidInstance {
                    id: label.to_string(),
                    message: "two exemplars share a label".to_string(),
                });
            }
        }
        Ok(FewShotSet { exemplars })
    }

    /// Exemplars in presentation order (A>B, A<B, no preference, equal).
    pub fn iter(&self) -> impl Iterator<Item = (PreferenceLabel, &ComparisonInstance)> {
        self.exemplars.iter().map(|(l, i)| (*l, i))
    }

    pub fn get(&self, label: PreferenceLabel) -> Option<&ComparisonInstance> {
        self.exemplars.get(&label)
    }

    pub fn len(&self) -> usize {
        self.exemplars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exemplars.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.exemplars.values().map(|i| i.id.as_str()).collect()
    }
}

pub const DEFAULT_WORD_THRESHOLD: usize = 100;

/// Pick, per label, the shortest text that still has more than
/// `word_threshold` words. Labels with no text above the threshold fall back
/// to their longest text. Equal word counts resolve to the smallest id.
pub fn select_fewshot_examples(d: &Dataset, word_threshold: usize) -> Result<FewShotSet> {
    let mut exemplars = BTreeMap::new();
    for &label in d.vocabulary() {
        let candidates: Vec<(usize, &ComparisonInstance)> = d
            .instances
            .iter()
            .filter(|i| i.gold_label == Some(label))
            .map(|i| (i.word_count(), i))
            .collect();
        if candidates.is_empty() {
            return Err(CorpusError::Coverage(label));
        }
        let above = candidates
            .iter()
            .filter(|(wc, _)| *wc > word_threshold)
            .min_by(|(wa, a), (wb, b)| wa.cmp(wb).then_with(|| a.id.cmp(&b.id)));
        let chosen = match above {
            Some(c) => c,
            None => candidates
                .iter()
                .min_by(|(wa, a), (wb, b)| wb.cmp(wa).then_with(|| a.id.cmp(&b.id)))
                .expect("non-empty"),
        };
        exemplars.insert(label, chosen.1.clone());
    }
    Ok(FewShotSet { exemplars })
}

/// The dataset minus the few-shot exemplars, order otherwise preserved.
pub fn split_eval_set(d: &Dataset, fs: &FewShotSet) -> Result<Dataset> {
    let mut excluded = HashSet::new();
    for (_, inst) in fs.iter() {
        match d.get(&inst.id) {
            Some(found) if found == inst => {
                excluded.insert(inst.id.as_str());
            }
            _ => return Err(CorpusError::Consistency(inst.id.clone())),
        }
    }
    Ok(Dataset {
        tag: d.tag.clone(),
        instances: d
            .instances
            .iter()
            .filter(|i| !excluded.contains(i.id.as_str()))
            .cloned()
            .collect(),
    })
}
