//! On-disk formats: prediction CSV files, the calibration document, frame
//! feature files and head parameter files.
//!
//! Every writer produces output that parses back to the same values and
//! re-serialises to the same bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{FusionCalibration, IntervalLayout, NUM_BINS};
use crate::head::{FrameSequence, HeadParameters};
use crate::score::{
    check_record, is_plausible, parse_part_label, part_label, RecordKind, ScoredRecord,
};

pub const PREDICTION_HEADER: [&str; 3] = ["speaker_id", "part", "score"];
pub const CALIBRATION_FORMAT_VERSION: u32 = 1;
pub const FEATURE_MAGIC: &str = "sla-features 1";
pub const PARAMETER_FORMAT_VERSION: u32 = 1;

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// prediction files

/// Parses `speaker_id,part,score` rows. The header must match exactly and
/// (speaker, part) keys must be unique.
pub fn parse_predictions(text: &str, kind: RecordKind) -> Result<Vec<ScoredRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| Error::Parse(e.to_string()))?;
    if header.iter().ne(PREDICTION_HEADER) {
        return Err(Error::Parse(format!(
            "expected header `{}`, found `{}`",
            PREDICTION_HEADER.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    let mut implausible = 0usize;
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::Parse(format!("line {line}: {e}")))?;
        let speaker = row[0].to_string();
        if speaker.is_empty() {
            return Err(Error::Parse(format!("line {line}: empty speaker_id")));
        }
        let part = parse_part_label(&row[1])?;
        let score: f64 = row[2]
            .parse()
            .map_err(|_| Error::Parse(format!("line {line}: invalid score {:?}", &row[2])))?;
        let record = check_record(
            ScoredRecord {
                speaker_id: speaker,
                part,
                score,
            },
            kind,
        )?;
        if !is_plausible(&record) {
            implausible += 1;
        }
        if !seen.insert(record.key()) {
            return Err(Error::DuplicateKey {
                speaker: record.speaker_id,
                part: part_label(record.part),
                source_name: format!("line {line}"),
            });
        }
        out.push(record);
    }
    if implausible > 0 {
        log::warn!("{implausible} score(s) lie outside [0, 6]");
    }
    Ok(out)
}

pub fn format_predictions(records: &[ScoredRecord]) -> String {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer
        .write_record(PREDICTION_HEADER)
        .expect("in-memory write");
    for r in records {
        writer
            .write_record([
                r.speaker_id.as_str(),
                &part_label(r.part),
                &r.score.to_string(),
            ])
            .expect("in-memory write");
    }
    String::from_utf8(writer.into_inner().expect("in-memory flush")).expect("utf-8 input")
}

pub fn read_predictions(path: &Path, kind: RecordKind) -> Result<Vec<ScoredRecord>> {
    parse_predictions(&read_text(path)?, kind).map_err(|e| match e {
        Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_predictions(path: &Path, records: &[ScoredRecord]) -> Result<()> {
    write_text(path, &format_predictions(records))
}

// ---------------------------------------------------------------------------
// calibration file

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Input role -> hex SHA-256 of the file contents.
    pub inputs: BTreeMap<String, String>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub format_version: u32,
    pub grid_step: f64,
    pub edges: Vec<f64>,
    pub weights: Vec<f64>,
    pub per_bin_counts: Vec<usize>,
    /// Absent for weight tables that were not fitted on a dev set.
    pub dev_rmse: Option<f64>,
    pub provenance: Provenance,
}

impl CalibrationFile {
    pub fn new(calib: &FusionCalibration, provenance: Provenance) -> Self {
        CalibrationFile {
            format_version: CALIBRATION_FORMAT_VERSION,
            grid_step: calib.grid_step,
            edges: calib.layout.edges().to_vec(),
            weights: calib.weights.to_vec(),
            per_bin_counts: calib.per_bin_counts.to_vec(),
            dev_rmse: calib.dev_rmse.is_finite().then_some(calib.dev_rmse),
            provenance,
        }
    }

    pub fn calibration(&self) -> Result<FusionCalibration> {
        let weights: [f64; NUM_BINS] = self.weights.as_slice().try_into().map_err(|_| {
            Error::Parse(format!(
                "expected {NUM_BINS} weights, found {}",
                self.weights.len()
            ))
        })?;
        let per_bin_counts: [usize; NUM_BINS] =
            self.per_bin_counts.as_slice().try_into().map_err(|_| {
                Error::Parse(format!(
                    "expected {NUM_BINS} bin counts, found {}",
                    self.per_bin_counts.len()
                ))
            })?;
        let calib = FusionCalibration {
            layout: IntervalLayout::new(&self.edges)?,
            weights,
            grid_step: self.grid_step,
            dev_rmse: self.dev_rmse.unwrap_or(f64::NAN),
            per_bin_counts,
        };
        calib.validate()?;
        Ok(calib)
    }

    pub fn to_text(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("serialisable");
        text.push('\n');
        text
    }

    /// Parses and validates; a different `format_version` is rejected before
    /// any other field is interpreted.
    pub fn from_text(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| Error::Parse(format!("calibration file: {e}")))?;
        let version = value
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::Parse("calibration file lacks format_version".into()))?;
        if version != u64::from(CALIBRATION_FORMAT_VERSION) {
            return Err(Error::CalibrationVersionMismatch {
                found: version as u32,
                expected: CALIBRATION_FORMAT_VERSION,
            });
        }
        let file: CalibrationFile = serde_json::from_value(value)
            .map_err(|e| Error::Parse(format!("calibration file: {e}")))?;
        file.calibration()?;
        Ok(file)
    }
}

pub fn read_calibration(path: &Path) -> Result<CalibrationFile> {
    CalibrationFile::from_text(&read_text(path)?)
}

pub fn write_calibration(path: &Path, file: &CalibrationFile) -> Result<()> {
    write_text(path, &file.to_text())
}

// ---------------------------------------------------------------------------
// feature files
//
//   sla-features 1
//   record <T> <d> <label|->
//   <d values>          (T lines)
//   record ...

pub fn format_features(data: &[FrameSequence]) -> String {
    let mut out = String::new();
    writeln!(out, "{FEATURE_MAGIC}").unwrap();
    for seq in data {
        let label = seq
            .label()
            .map_or_else(|| "-".to_string(), |l| l.to_string());
        writeln!(out, "record {} {} {label}", seq.len(), seq.dim()).unwrap();
        for row in seq.frames().rows() {
            let line: Vec<String> = row.iter().map(f64::to_string).collect();
            writeln!(out, "{}", line.join(" ")).unwrap();
        }
    }
    out
}

pub fn parse_features(text: &str) -> Result<Vec<FrameSequence>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, FEATURE_MAGIC)) => {}
        other => {
            return Err(Error::Parse(format!(
                "feature file must start with `{FEATURE_MAGIC}`, found {:?}",
                other.map(|(_, l)| l)
            )))
        }
    }
    let bad =
        |line: usize, msg: &str| Error::Parse(format!("feature file line {}: {msg}", line + 1));
    let mut out = Vec::new();
    while let Some((n, header)) = lines.next() {
        let fields: Vec<&str> = header.split(' ').collect();
        let [tag, t, d, label] = fields[..] else {
            return Err(bad(n, "expected `record <T> <d> <label|->`"));
        };
        if tag != "record" {
            return Err(bad(n, "expected `record`"));
        }
        let t: usize = t.parse().map_err(|_| bad(n, "invalid frame count"))?;
        let d: usize = d.parse().map_err(|_| bad(n, "invalid dimension"))?;
        let label = match label {
            "-" => None,
            l => Some(l.parse::<f64>().map_err(|_| bad(n, "invalid label"))?),
        };
        let mut values = Vec::with_capacity(t * d);
        for _ in 0..t {
            let (m, row) = lines.next().ok_or_else(|| bad(n, "truncated record"))?;
            let before = values.len();
            for v in row.split(' ') {
                values.push(v.parse::<f64>().map_err(|_| bad(m, "invalid value"))?);
            }
            if values.len() - before != d {
                return Err(bad(
                    m,
                    &format!("expected {d} values, found {}", values.len() - before),
                ));
            }
        }
        let frames = Array2::from_shape_vec((t, d), values).map_err(|e| bad(n, &e.to_string()))?;
        out.push(FrameSequence::new(frames, label)?);
    }
    Ok(out)
}

pub fn read_features(path: &Path) -> Result<Vec<FrameSequence>> {
    parse_features(&read_text(path)?)
}

pub fn write_features(path: &Path, data: &[FrameSequence]) -> Result<()> {
    write_text(path, &format_features(data))
}

// ---------------------------------------------------------------------------
// head parameter files

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParameterFile {
    format_version: u32,
    dim: usize,
    attn_dim: usize,
    num_levels: usize,
    output_dim: usize,
    parameters: HeadParameters,
}

pub fn format_parameters(params: &HeadParameters) -> String {
    let file = ParameterFile {
        format_version: PARAMETER_FORMAT_VERSION,
        dim: params.dim(),
        attn_dim: params.attn_dim(),
        num_levels: params.num_levels(),
        output_dim: params.output_dim(),
        parameters: params.clone(),
    };
    let mut text = serde_json::to_string_pretty(&file).expect("serialisable");
    text.push('\n');
    text
}

pub fn parse_parameters(text: &str) -> Result<HeadParameters> {
    let file: ParameterFile =
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("parameter file: {e}")))?;
    if file.format_version != PARAMETER_FORMAT_VERSION {
        return Err(Error::Parse(format!(
            "parameter file version {} is not supported",
            file.format_version
        )));
    }
    let p = file.parameters;
    p.check_shapes()?;
    let header = (file.dim, file.attn_dim, file.num_levels, file.output_dim);
    if header != (p.dim(), p.attn_dim(), p.num_levels(), p.output_dim()) {
        return Err(Error::ShapeMismatch(format!(
            "parameter header {header:?} does not match tensors"
        )));
    }
    Ok(p)
}

pub fn read_parameters(path: &Path) -> Result<HeadParameters> {
    parse_parameters(&read_text(path)?)
}

pub fn write_parameters(path: &Path, params: &HeadParameters) -> Result<()> {
    write_text(path, &format_parameters(params))
}
