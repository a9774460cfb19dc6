//! Python bindings: metrics, interval fusion, aggregation, synthetic data and
//! the attention head. Sequences are passed as nested lists of floats.

use ndarray::Array2;
use pyo3::create_exception;
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

use sla_core::fusion::{self, NUM_BINS};
use sla_core::head::{self, TrainConfig};
use sla_core::io::{self, CalibrationFile, Provenance};
use sla_core::score::{JoinedDataset, JoinedRow, Part, ScoredRecord};
use sla_core::{metrics, report, synth};

create_exception!(sla_fusion, SlaError, PyValueError);

fn err(e: sla_core::Error) -> PyErr {
    match e {
        sla_core::Error::Io(msg) => PyOSError::new_err(msg),
        other => SlaError::new_err(other.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for sla_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(err)
    }
}

#[pyfunction]
fn rmse(pred: Vec<f64>, reference: Vec<f64>) -> PyResult<f64> {
    metrics::rmse(&pred, &reference).py()
}

#[pyfunction]
fn pearson(pred: Vec<f64>, reference: Vec<f64>) -> PyResult<f64> {
    metrics::pearson(&pred, &reference).py()
}

#[pyfunction]
fn spearman(pred: Vec<f64>, reference: Vec<f64>) -> PyResult<f64> {
    metrics::spearman(&pred, &reference).py()
}

#[pyfunction]
fn within_tolerance(pred: Vec<f64>, reference: Vec<f64>, tol: f64) -> PyResult<f64> {
    metrics::within_tolerance(&pred, &reference, tol).py()
}

#[pyfunction]
fn macro_f1(pred: Vec<f64>, reference: Vec<f64>) -> PyResult<f64> {
    metrics::macro_f1(&pred, &reference).py()
}

#[pyfunction]
fn snap_to_level(score: f64) -> f64 {
    metrics::snap_to_level(score)
}

#[pyclass(name = "MetricReport", frozen)]
struct PyMetricReport(sla_core::MetricReport);

#[pymethods]
impl PyMetricReport {
    #[getter]
    fn rmse(&self) -> f64 {
        self.0.rmse
    }
    #[getter]
    fn pcc(&self) -> f64 {
        self.0.pcc
    }
    #[getter]
    fn src(&self) -> f64 {
        self.0.src
    }
    #[getter]
    fn within_half(&self) -> f64 {
        self.0.within_half
    }
    #[getter]
    fn within_one(&self) -> f64 {
        self.0.within_one
    }
    #[getter]
    fn n(&self) -> usize {
        self.0.n
    }

    /// Leaderboard row: `RMSE PCC SRC %<=0.5 %<=1.0`.
    fn row(&self) -> String {
        report::format_values(&self.0)
    }

    fn __repr__(&self) -> String {
        format!("MetricReport({})", report::format_values(&self.0))
    }
}

#[pyfunction]
fn evaluate(pred: Vec<f64>, reference: Vec<f64>) -> PyResult<PyMetricReport> {
    metrics::full_report(&pred, &reference)
        .py()
        .map(PyMetricReport)
}

#[pyclass(name = "IntervalLayout", frozen, from_py_object)]
#[derive(Clone)]
struct PyIntervalLayout(fusion::IntervalLayout);

#[pymethods]
impl PyIntervalLayout {
    #[new]
    #[pyo3(signature = (edges=None))]
    fn new(edges: Option<Vec<f64>>) -> PyResult<Self> {
        match edges {
            Some(e) => fusion::IntervalLayout::new(&e).py().map(PyIntervalLayout),
            None => Ok(PyIntervalLayout(fusion::IntervalLayout::default())),
        }
    }

    #[getter]
    fn edges(&self) -> Vec<f64> {
        self.0.edges().to_vec()
    }

    fn bin_index(&self, score: f64) -> PyResult<usize> {
        self.0.bin_index(score).py()
    }

    fn describe(&self, bin: usize) -> PyResult<String> {
        if bin >= NUM_BINS {
            return Err(SlaError::new_err(format!("bin {bin} out of range")));
        }
        Ok(self.0.describe(bin))
    }
}

#[pyclass(name = "FusionCalibration", frozen)]
struct PyFusionCalibration(fusion::FusionCalibration);

#[pymethods]
impl PyFusionCalibration {
    /// Hand-built weight table; each weight must lie on the grid.
    #[staticmethod]
    #[pyo3(signature = (weights, grid_step=fusion::DEFAULT_GRID_STEP, layout=None))]
    fn with_weights(
        weights: Vec<f64>,
        grid_step: f64,
        layout: Option<PyIntervalLayout>,
    ) -> PyResult<Self> {
        let weights: [f64; NUM_BINS] = weights.try_into().map_err(|w: Vec<f64>| {
            SlaError::new_err(format!("expected {NUM_BINS} weights, got {}", w.len()))
        })?;
        let layout = layout.map(|l| l.0).unwrap_or_default();
        fusion::FusionCalibration::with_weights(layout, weights, grid_step)
            .py()
            .map(PyFusionCalibration)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        CalibrationFile::from_text(text)
            .and_then(|f| f.calibration())
            .py()
            .map(PyFusionCalibration)
    }

    fn to_json(&self) -> String {
        CalibrationFile::new(&self.0, Provenance::default()).to_text()
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.0.weights.to_vec()
    }
    #[getter]
    fn per_bin_counts(&self) -> Vec<usize> {
        self.0.per_bin_counts.to_vec()
    }
    #[getter]
    fn grid_step(&self) -> f64 {
        self.0.grid_step
    }
    /// `None` for tables not fitted on a dev set.
    #[getter]
    fn dev_rmse(&self) -> Option<f64> {
        self.0.dev_rmse.is_finite().then_some(self.0.dev_rmse)
    }
    #[getter]
    fn layout(&self) -> PyIntervalLayout {
        PyIntervalLayout(self.0.layout)
    }

    fn weight_for(&self, mllm: f64) -> PyResult<f64> {
        self.0.weight_for(mllm).py()
    }

    fn fuse_one(&self, w2v: f64, mllm: f64) -> PyResult<f64> {
        fusion::fuse_one(w2v, mllm, &self.0).py()
    }

    #[pyo3(signature = (w2v, mllm, clamp=false))]
    fn fuse(&self, w2v: Vec<f64>, mllm: Vec<f64>, clamp: bool) -> PyResult<Vec<f64>> {
        let data = anonymous_dataset(&w2v, &mllm, None)?;
        let fused = fusion::fuse_dataset(&data, &self.0, clamp).py()?;
        Ok(fused.into_iter().map(|r| r.score).collect())
    }

    fn __repr__(&self) -> String {
        format!("FusionCalibration(weights={:?})", self.0.weights)
    }
}

/// Rows keyed by position; fused outputs come back in input order.
fn anonymous_dataset(
    w2v: &[f64],
    mllm: &[f64],
    reference: Option<&[f64]>,
) -> PyResult<JoinedDataset> {
    let n = w2v.len();
    for len in [mllm.len()].into_iter().chain(reference.map(<[f64]>::len)) {
        if len != n {
            return Err(err(sla_core::Error::LengthMismatch(n, len)));
        }
    }
    let rows = (0..n)
        .map(|i| JoinedRow {
            speaker_id: format!("row{i:09}"),
            part: Some(Part::Interview),
            w2v: w2v[i],
            mllm: mllm[i],
            reference: reference.map(|r| r[i]),
        })
        .collect();
    JoinedDataset::new(rows).py()
}

/// Fits one interpolation weight per multimodal-score interval.
#[pyfunction]
#[pyo3(signature = (w2v, mllm, reference, grid_step=fusion::DEFAULT_GRID_STEP, layout=None))]
fn calibrate(
    w2v: Vec<f64>,
    mllm: Vec<f64>,
    reference: Vec<f64>,
    grid_step: f64,
    layout: Option<PyIntervalLayout>,
) -> PyResult<PyFusionCalibration> {
    let dev = anonymous_dataset(&w2v, &mllm, Some(&reference))?;
    fusion::calibrate(&dev, layout.map(|l| l.0).unwrap_or_default(), grid_step)
        .py()
        .map(PyFusionCalibration)
}

#[pyfunction]
fn interpolate(w2v: f64, mllm: f64, weight: f64) -> f64 {
    fusion::interpolate(w2v, mllm, weight)
}

/// Takes `(speaker_id, part, score)` tuples with parts 1, 3, 4, 5 and
/// returns `(speaker_id, overall)` sorted by speaker.
#[pyfunction]
fn aggregate_overall(records: Vec<(String, u8, f64)>) -> PyResult<Vec<(String, f64)>> {
    let records = records
        .into_iter()
        .map(|(speaker, part, score)| Ok(ScoredRecord::new(speaker, Part::from_id(part)?, score)))
        .collect::<sla_core::Result<Vec<_>>>()
        .py()?;
    let overall = fusion::aggregate_overall(&records).py()?;
    Ok(overall
        .into_iter()
        .map(|r| (r.speaker_id, r.score))
        .collect())
}

type ScoreRow = (String, u8, f64, f64, f64);

/// Returns `(speaker_id, part, w2v, mllm, reference)` rows.
#[pyfunction]
#[pyo3(signature = (n_speakers=100, seed=0, heteroscedastic=false, w2v_noise=None, mllm_noise=None))]
fn generate_scores(
    n_speakers: usize,
    seed: u64,
    heteroscedastic: bool,
    w2v_noise: Option<f64>,
    mllm_noise: Option<f64>,
) -> PyResult<Vec<ScoreRow>> {
    let mut cfg = if heteroscedastic {
        synth::SynthConfig::heteroscedastic(n_speakers, seed)
    } else {
        synth::SynthConfig {
            n_speakers,
            seed,
            ..Default::default()
        }
    };
    if let Some(s) = w2v_noise {
        cfg.w2v_noise = [s; NUM_BINS];
    }
    if let Some(s) = mllm_noise {
        cfg.mllm_noise = [s; NUM_BINS];
    }
    let data = synth::generate_scores(&cfg).py()?;
    Ok(data
        .rows()
        .iter()
        .map(|r| {
            let part = r.part.map(Part::id).unwrap_or(0);
            (
                r.speaker_id.clone(),
                part,
                r.w2v,
                r.mllm,
                r.reference.unwrap_or(f64::NAN),
            )
        })
        .collect())
}

type Sequence = (Vec<Vec<f64>>, f64);
type EpochRow = (usize, f64, f64, f64);

/// Returns `(frames, label)` pairs, `frames` a T x d nested list.
#[pyfunction]
#[pyo3(signature = (n_per_class, levels, dim, separation, seed=0))]
fn generate_frames(
    n_per_class: usize,
    levels: Vec<f64>,
    dim: usize,
    separation: f64,
    seed: u64,
) -> PyResult<Vec<Sequence>> {
    let seqs = synth::generate_frames(n_per_class, &levels, dim, separation, seed).py()?;
    Ok(seqs
        .iter()
        .map(|s| {
            let frames = s.frames().outer_iter().map(|r| r.to_vec()).collect();
            (frames, s.label().unwrap_or(f64::NAN))
        })
        .collect())
}

fn to_sequence(frames: Vec<Vec<f64>>, label: Option<f64>) -> PyResult<head::FrameSequence> {
    let t = frames.len();
    let d = frames.first().map_or(0, Vec::len);
    if frames.iter().any(|r| r.len() != d) {
        return Err(SlaError::new_err("frames must all have the same dimension"));
    }
    let flat: Vec<f64> = frames.into_iter().flatten().collect();
    let array =
        Array2::from_shape_vec((t, d), flat).map_err(|e| SlaError::new_err(e.to_string()))?;
    head::FrameSequence::new(array, label).py()
}

fn to_sequences(data: Vec<Sequence>) -> PyResult<Vec<head::FrameSequence>> {
    data.into_iter()
        .map(|(f, l)| to_sequence(f, Some(l)))
        .collect()
}

#[pyclass(name = "AttentionHead", frozen)]
struct PyAttentionHead(head::HeadParameters);

#[pymethods]
impl PyAttentionHead {
    /// Trains on `(frames, label)` pairs and keeps the epoch with the best
    /// dev macro-F1. Returns the head and the per-epoch history as
    /// `(epoch, train_loss, dev_macro_f1, learning_rate)` tuples.
    #[staticmethod]
    #[pyo3(signature = (
        train, dev, mode="classification", epochs=30, learning_rate=1e-4, warmup_steps=600,
        batch_size=8, weight_decay=0.01, attn_dim=16, seed=0
    ))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        py: Python<'_>,
        train: Vec<Sequence>,
        dev: Vec<Sequence>,
        mode: &str,
        epochs: usize,
        learning_rate: f64,
        warmup_steps: usize,
        batch_size: usize,
        weight_decay: f64,
        attn_dim: usize,
        seed: u64,
    ) -> PyResult<(Self, Vec<EpochRow>)> {
        let config = TrainConfig {
            epochs,
            learning_rate,
            warmup_steps,
            seed,
            mode: mode.parse().py()?,
            batch_size,
            weight_decay,
            attn_dim,
        };
        let (train, dev) = (to_sequences(train)?, to_sequences(dev)?);
        let outcome = py.detach(|| head::train(&train, &dev, &config)).py()?;
        let history = outcome
            .history
            .iter()
            .map(|e| (e.epoch, e.train_loss, e.dev_macro_f1, e.learning_rate))
            .collect();
        Ok((PyAttentionHead(outcome.best), history))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        io::parse_parameters(text).py().map(PyAttentionHead)
    }

    fn to_json(&self) -> String {
        io::format_parameters(&self.0)
    }

    /// Expected score under the level posterior (classification) or the raw
    /// output (regression).
    fn predict_score(&self, frames: Vec<Vec<f64>>) -> PyResult<f64> {
        head::predict_score(&to_sequence(frames, None)?, &self.0).py()
    }

    fn predict_level(&self, frames: Vec<Vec<f64>>) -> PyResult<f64> {
        let cache = head::forward(&to_sequence(frames, None)?, &self.0).py()?;
        Ok(head::decode_label(cache.output(), &self.0))
    }

    fn attention(&self, frames: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        Ok(
            head::attention_weights(&to_sequence(frames, None)?, &self.0)
                .py()?
                .to_vec(),
        )
    }

    #[getter]
    fn levels(&self) -> Vec<f64> {
        self.0.levels.clone()
    }
    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }
}

#[pymodule]
fn sla_fusion(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SlaError", m.py().get_type::<SlaError>())?;
    m.add("NUM_BINS", NUM_BINS)?;
    m.add_class::<PyMetricReport>()?;
    m.add_class::<PyIntervalLayout>()?;
    m.add_class::<PyFusionCalibration>()?;
    m.add_class::<PyAttentionHead>()?;
    for f in [
        wrap_pyfunction!(rmse, m)?,
        wrap_pyfunction!(pearson, m)?,
        wrap_pyfunction!(spearman, m)?,
        wrap_pyfunction!(within_tolerance, m)?,
        wrap_pyfunction!(macro_f1, m)?,
        wrap_pyfunction!(snap_to_level, m)?,
        wrap_pyfunction!(evaluate, m)?,
        wrap_pyfunction!(calibrate, m)?,
        wrap_pyfunction!(interpolate, m)?,
        wrap_pyfunction!(aggregate_overall, m)?,
        wrap_pyfunction!(generate_scores, m)?,
        wrap_pyfunction!(generate_frames, m)?,
    ] {
        m.add_function(f)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anonymous_rows_keep_input_order() {
        let w2v: Vec<f64> = (0..25).map(|i| 2.0 + i as f64 * 0.1).collect();
        let data = anonymous_dataset(&w2v, &w2v, None).unwrap();
        assert_eq!(data.w2v_scores(), w2v);
    }
}
