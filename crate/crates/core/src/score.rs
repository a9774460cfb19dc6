//! Scores, task parts, scored records and the joined two-grader dataset.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lowest reference level (A2).
pub const MIN_LEVEL: f64 = 2.0;
/// Highest reference level (C1+).
pub const MAX_LEVEL: f64 = 5.5;
/// Spacing of the reference grid.
pub const LEVEL_STEP: f64 = 0.5;
/// Predictions outside this range are legal but logged.
pub const PLAUSIBLE_RANGE: (f64, f64) = (0.0, 6.0);

/// The eight reference levels, 2.0 through 5.5.
pub fn reference_levels() -> [f64; 8] {
    std::array::from_fn(|i| MIN_LEVEL + LEVEL_STEP * i as f64)
}

/// True when `score` is exactly one of the eight reference levels.
pub fn is_reference_level(score: f64) -> bool {
    score.is_finite() && (MIN_LEVEL..=MAX_LEVEL).contains(&score) && (score * 2.0).fract() == 0.0
}

/// Speaking task type. Only parts 1, 3, 4 and 5 exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Part {
    Interview,
    Opinion,
    Presentation,
    CommunicationActivity,
}

impl Part {
    pub const ALL: [Part; 4] = [
        Part::Interview,
        Part::Opinion,
        Part::Presentation,
        Part::CommunicationActivity,
    ];

    pub fn from_id(id: u8) -> Result<Part> {
        match id {
            1 => Ok(Part::Interview),
            3 => Ok(Part::Opinion),
            4 => Ok(Part::Presentation),
            5 => Ok(Part::CommunicationActivity),
            other => Err(Error::InvalidPart(other.to_string())),
        }
    }

    pub fn id(self) -> u8 {
        match self {
            Part::Interview => 1,
            Part::Opinion => 3,
            Part::Presentation => 4,
            Part::CommunicationActivity => 5,
        }
    }
}

impl fmt::Display for Part {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.id())
    }
}

/// Label used for the part column; `None` is an overall (per-speaker) score.
pub fn part_label(part: Option<Part>) -> String {
    match part {
        Some(p) => p.to_string(),
        None => "overall".to_string(),
    }
}

/// Parses a part column value: `1`, `3`, `4`, `5` or `overall`.
pub fn parse_part_label(s: &str) -> Result<Option<Part>> {
    if s == "overall" {
        return Ok(None);
    }
    let id: u8 = s.parse().map_err(|_| Error::InvalidPart(s.to_string()))?;
    Part::from_id(id).map(Some)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordKind {
    Reference,
    Prediction,
}

/// One score for one (speaker, part). `part == None` marks an overall score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRecord {
    pub speaker_id: String,
    pub part: Option<Part>,
    pub score: f64,
}

impl ScoredRecord {
    pub fn new(speaker_id: impl Into<String>, part: Part, score: f64) -> Self {
        ScoredRecord {
            speaker_id: speaker_id.into(),
            part: Some(part),
            score,
        }
    }

    pub fn overall(speaker_id: impl Into<String>, score: f64) -> Self {
        ScoredRecord {
            speaker_id: speaker_id.into(),
            part: None,
            score,
        }
    }

    pub fn key(&self) -> (String, Option<Part>) {
        (self.speaker_id.clone(), self.part)
    }
}

/// Checks a record against the rules for its kind and hands it back.
///
/// References must sit on the 0.5 grid in [2.0, 5.5]. Predictions only need
/// to be finite; values outside [0, 6] are logged.
pub fn validate_record(record: ScoredRecord, kind: RecordKind) -> Result<ScoredRecord> {
    let record = check_record(record, kind)?;
    if !is_plausible(&record) {
        log::warn!(
            "prediction {} for ({}, {}) lies outside [{}, {}]",
            record.score,
            record.speaker_id,
            part_label(record.part),
            PLAUSIBLE_RANGE.0,
            PLAUSIBLE_RANGE.1
        );
    }
    Ok(record)
}

pub(crate) fn is_plausible(record: &ScoredRecord) -> bool {
    (PLAUSIBLE_RANGE.0..=PLAUSIBLE_RANGE.1).contains(&record.score)
}

/// [`validate_record`] without the range warning.
pub(crate) fn check_record(record: ScoredRecord, kind: RecordKind) -> Result<ScoredRecord> {
    if !record.score.is_finite() {
        return Err(Error::NonFiniteScore(record.score));
    }
    let on_grid = match (kind, record.part) {
        (RecordKind::Prediction, _) => true,
        // overall references are means of four part levels: multiples of 0.125
        (RecordKind::Reference, None) => {
            (record.score * 8.0).fract() == 0.0 && (MIN_LEVEL..=MAX_LEVEL).contains(&record.score)
        }
        (RecordKind::Reference, Some(_)) => is_reference_level(record.score),
    };
    if on_grid {
        Ok(record)
    } else {
        Err(Error::OffGridReference {
            speaker: record.speaker_id.clone(),
            part: part_label(record.part),
            score: record.score,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JoinedRow {
    pub speaker_id: String,
    pub part: Option<Part>,
    pub w2v: f64,
    pub mllm: f64,
    pub reference: Option<f64>,
}

/// Rows carrying both grader scores, sorted by (speaker, part).
///
/// Either every row has a reference (dev/train) or none does (blind).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct JoinedDataset {
    rows: Vec<JoinedRow>,
}

impl JoinedDataset {
    pub fn new(rows: Vec<JoinedRow>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for row in &rows {
            if !seen.insert((row.speaker_id.as_str(), row.part)) {
                return Err(Error::DuplicateKey {
                    speaker: row.speaker_id.clone(),
                    part: part_label(row.part),
                    source_name: "dataset".into(),
                });
            }
        }
        let with_refs = rows.iter().filter(|r| r.reference.is_some()).count();
        if with_refs != 0 && with_refs != rows.len() {
            return Err(Error::MixedReferences);
        }
        Ok(JoinedDataset { rows })
    }

    pub fn rows(&self) -> &[JoinedRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// No references present.
    pub fn is_blind(&self) -> bool {
        self.rows.first().is_none_or(|r| r.reference.is_none())
    }

    pub fn w2v_scores(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.w2v).collect()
    }

    pub fn mllm_scores(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.mllm).collect()
    }

    /// Reference column, or `NoReferences` for a blind dataset.
    pub fn references(&self) -> Result<Vec<f64>> {
        self.rows
            .iter()
            .map(|r| r.reference.ok_or(Error::NoReferences))
            .collect()
    }

    /// Splits the dataset back into its (w2v, mllm, reference) streams.
    pub fn projections(
        &self,
    ) -> (
        Vec<ScoredRecord>,
        Vec<ScoredRecord>,
        Option<Vec<ScoredRecord>>,
    ) {
        let pick = |f: &dyn Fn(&JoinedRow) -> f64| -> Vec<ScoredRecord> {
            self.rows
                .iter()
                .map(|r| ScoredRecord {
                    speaker_id: r.speaker_id.clone(),
                    part: r.part,
                    score: f(r),
                })
                .collect()
        };
        let refs = if self.is_blind() {
            None
        } else {
            Some(pick(&|r| r.reference.unwrap_or(f64::NAN)))
        };
        (pick(&|r| r.w2v), pick(&|r| r.mllm), refs)
    }
}

/// Result of [`join`]: the dataset plus keys that were dropped because they
/// were missing from at least one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct JoinOutcome {
    pub dataset: JoinedDataset,
    pub unmatched: Vec<(String, Option<Part>)>,
}

type Key = (String, Option<Part>);

fn index(records: &[ScoredRecord], name: &str) -> Result<BTreeMap<Key, f64>> {
    let mut map = BTreeMap::new();
    for r in records {
        if map.insert(r.key(), r.score).is_some() {
            return Err(Error::DuplicateKey {
                speaker: r.speaker_id.clone(),
                part: part_label(r.part),
                source_name: name.to_string(),
            });
        }
    }
    Ok(map)
}

/// Inner join on (speaker, part). Rows come out sorted by key, so the result
/// does not depend on input order.
pub fn join(
    w2v: &[ScoredRecord],
    mllm: &[ScoredRecord],
    refs: Option<&[ScoredRecord]>,
) -> Result<JoinOutcome> {
    let w2v = index(w2v, "w2v")?;
    let mllm = index(mllm, "mllm")?;
    let refs = refs.map(|r| index(r, "references")).transpose()?;

    let mut all: BTreeSet<&Key> = w2v.keys().chain(mllm.keys()).collect();
    if let Some(r) = &refs {
        all.extend(r.keys());
    }

    let mut rows = Vec::new();
    let mut unmatched = Vec::new();
    for key in all {
        let reference = refs.as_ref().map(|r| r.get(key).copied());
        match (w2v.get(key), mllm.get(key), reference) {
            (Some(&a), Some(&b), None) => rows.push(joined_row(key, a, b, None)),
            (Some(&a), Some(&b), Some(Some(r))) => rows.push(joined_row(key, a, b, Some(r))),
            _ => unmatched.push(key.clone()),
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptyJoin);
    }
    if !unmatched.is_empty() {
        log::warn!(
            "{} key(s) present in only some inputs were dropped: {}",
            unmatched.len(),
            unmatched
                .iter()
                .take(10)
                .map(|(s, p)| format!("({s}, {})", part_label(*p)))
                .collect::<Vec<_>>()
                .join(", ")
        );
    }
    Ok(JoinOutcome {
        dataset: JoinedDataset::new(rows)?,
        unmatched,
    })
}

/// Predictions and references paired on (speaker, part), sorted by key.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub keys: Vec<(String, Option<Part>)>,
    pub predictions: Vec<f64>,
    pub references: Vec<f64>,
    pub unmatched: Vec<(String, Option<Part>)>,
}

/// Inner join of one prediction stream with references.
pub fn align(pred: &[ScoredRecord], refs: &[ScoredRecord]) -> Result<Alignment> {
    let pred = index(pred, "predictions")?;
    let refs = index(refs, "references")?;
    let mut out = Alignment {
        keys: Vec::new(),
        predictions: Vec::new(),
        references: Vec::new(),
        unmatched: Vec::new(),
    };
    let all: BTreeSet<&Key> = pred.keys().chain(refs.keys()).collect();
    for key in all {
        match (pred.get(key), refs.get(key)) {
            (Some(&p), Some(&r)) => {
                out.keys.push(key.clone());
                out.predictions.push(p);
                out.references.push(r);
            }
            _ => out.unmatched.push(key.clone()),
        }
    }
    if out.keys.is_empty() {
        return Err(Error::EmptyJoin);
    }
    if !out.unmatched.is_empty() {
        log::warn!("{} unmatched key(s) ignored", out.unmatched.len());
    }
    Ok(out)
}

fn joined_row(key: &Key, w2v: f64, mllm: f64, reference: Option<f64>) -> JoinedRow {
    JoinedRow {
        speaker_id: key.0.clone(),
        part: key.1,
        w2v,
        mllm,
        reference,
    }
}
