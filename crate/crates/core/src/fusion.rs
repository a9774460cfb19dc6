//! Score-conditioned fusion of the speech grader and the multimodal grader.
//!
//! The multimodal score selects one of eight CEFR-aligned intervals; each
//! interval owns an interpolation weight `w` and the fused score is
//! `(1 - w) * w2v + w * mllm`. Weights are fitted per interval by an
//! exhaustive grid search that minimises dev-set RMSE, then frozen.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics;
use crate::score::{part_label, JoinedDataset, Part, ScoredRecord, MAX_LEVEL, MIN_LEVEL};

pub const NUM_BINS: usize = 8;
pub const DEFAULT_GRID_STEP: f64 = 0.01;

/// Interval edges over the multimodal score. Bins are `[e_k, e_{k+1})`
/// except the last, which also contains its right edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalLayout {
    edges: [f64; NUM_BINS + 1],
}

impl Default for IntervalLayout {
    fn default() -> Self {
        IntervalLayout {
            edges: [0.0, 2.25, 2.75, 3.25, 3.75, 4.25, 4.75, 5.25, 6.0],
        }
    }
}

impl IntervalLayout {
    pub fn new(edges: &[f64]) -> Result<Self> {
        let edges: [f64; NUM_BINS + 1] = edges.try_into().map_err(|_| {
            Error::InvalidConfig(format!(
                "expected {} edges, got {}",
                NUM_BINS + 1,
                edges.len()
            ))
        })?;
        if edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(format!(
                "interval edges must be finite and strictly increasing: {edges:?}"
            )));
        }
        Ok(IntervalLayout { edges })
    }

    pub fn edges(&self) -> &[f64; NUM_BINS + 1] {
        &self.edges
    }

    pub fn bounds(&self, bin: usize) -> (f64, f64) {
        (self.edges[bin], self.edges[bin + 1])
    }

    /// Human-readable interval, e.g. `[2.75, 3.25)`.
    pub fn describe(&self, bin: usize) -> String {
        let (lo, hi) = self.bounds(bin);
        let close = if bin + 1 == NUM_BINS { ']' } else { ')' };
        format!("[{lo:.2}, {hi:.2}{close}")
    }

    /// Index of the interval containing `score`. Scores outside the layout
    /// clamp to the first or last bin.
    pub fn bin_index(&self, score: f64) -> Result<usize> {
        if !score.is_finite() {
            return Err(Error::NonFiniteScore(score));
        }
        let (lo, hi) = (self.edges[0], self.edges[NUM_BINS]);
        if score < lo || score > hi {
            log::warn!("multimodal score {score} outside [{lo}, {hi}], clamped to the edge bin");
        }
        // number of interior edges at or below the score
        Ok(self.edges[1..NUM_BINS]
            .iter()
            .take_while(|&&e| e <= score)
            .count())
    }
}

/// Frozen per-interval weights plus the dev statistics they were fitted on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionCalibration {
    pub layout: IntervalLayout,
    pub weights: [f64; NUM_BINS],
    pub grid_step: f64,
    pub dev_rmse: f64,
    pub per_bin_counts: [usize; NUM_BINS],
}

impl FusionCalibration {
    /// Builds a calibration from explicit weights, checking that every weight
    /// lies in [0, 1] on the grid.
    pub fn with_weights(
        layout: IntervalLayout,
        weights: [f64; NUM_BINS],
        grid_step: f64,
    ) -> Result<Self> {
        let calib = FusionCalibration {
            layout,
            weights,
            grid_step,
            dev_rmse: f64::NAN,
            per_bin_counts: [0; NUM_BINS],
        };
        calib.validate()?;
        Ok(calib)
    }

    pub fn validate(&self) -> Result<()> {
        let steps = grid_steps(self.grid_step)?;
        IntervalLayout::new(self.layout.edges())?;
        for (k, &w) in self.weights.iter().enumerate() {
            let on_grid = (w * steps as f64 - (w * steps as f64).round()).abs() < 1e-9;
            if !(0.0..=1.0).contains(&w) || !on_grid {
                return Err(Error::InvalidConfig(format!(
                    "weight {w} for bin {k} is not a multiple of {} in [0, 1]",
                    self.grid_step
                )));
            }
        }
        Ok(())
    }

    pub fn weight_for(&self, mllm: f64) -> Result<f64> {
        Ok(self.weights[self.layout.bin_index(mllm)?])
    }
}

/// Number of grid intervals on [0, 1]; `grid_step` must divide 1.
pub fn grid_steps(grid_step: f64) -> Result<usize> {
    if !(grid_step > 0.0 && grid_step <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "grid step {grid_step} not in (0, 1]"
        )));
    }
    let steps = (1.0 / grid_step).round();
    if (steps * grid_step - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "grid step {grid_step} does not divide 1"
        )));
    }
    Ok(steps as usize)
}

/// Convex combination of the two grader scores.
pub fn interpolate(w2v: f64, mllm: f64, weight: f64) -> f64 {
    (1.0 - weight) * w2v + weight * mllm
}

pub fn fuse_one(w2v: f64, mllm: f64, calib: &FusionCalibration) -> Result<f64> {
    if !w2v.is_finite() {
        return Err(Error::NonFiniteScore(w2v));
    }
    Ok(interpolate(w2v, mllm, calib.weight_for(mllm)?))
}

/// One fused record per row, in row order. With `clamp`, scores are limited
/// to the reference range [2.0, 5.5].
pub fn fuse_dataset(
    data: &JoinedDataset,
    calib: &FusionCalibration,
    clamp: bool,
) -> Result<Vec<ScoredRecord>> {
    data.rows()
        .par_iter()
        .map(|row| {
            let mut score = fuse_one(row.w2v, row.mllm, calib)?;
            if clamp {
                score = score.clamp(MIN_LEVEL, MAX_LEVEL);
            }
            Ok(ScoredRecord {
                speaker_id: row.speaker_id.clone(),
                part: row.part,
                score,
            })
        })
        .collect()
}

type Triple = (f64, f64, f64);

/// First grid weight (ascending) with the lowest RMSE over `rows`.
fn grid_argmin(rows: &[Triple], steps: usize) -> (f64, f64) {
    let n = rows.len() as f64;
    let mut best = (0.0, f64::INFINITY);
    for i in 0..=steps {
        let w = i as f64 / steps as f64;
        let sse: f64 = rows
            .iter()
            .map(|&(a, b, r)| {
                let e = interpolate(a, b, w) - r;
                e * e
            })
            .sum();
        let rmse = (sse / n).sqrt();
        if rmse < best.1 {
            best = (w, rmse);
        }
    }
    best
}

fn dev_triples(dev: &JoinedDataset) -> Result<Vec<Triple>> {
    if dev.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let refs = dev.references()?;
    dev.rows()
        .iter()
        .zip(refs)
        .map(|(row, r)| {
            for v in [row.w2v, row.mllm] {
                if !v.is_finite() {
                    return Err(Error::NonFiniteScore(v));
                }
            }
            Ok((row.w2v, row.mllm, r))
        })
        .collect()
}

/// The single weight, shared by all intervals, that minimises dev RMSE.
pub fn best_global_weight(dev: &JoinedDataset, grid_step: f64) -> Result<(f64, f64)> {
    let steps = grid_steps(grid_step)?;
    Ok(grid_argmin(&dev_triples(dev)?, steps))
}

/// Fits one weight per interval by grid search on `dev`.
///
/// Ties go to the smaller weight. Intervals without dev rows receive the
/// global optimum.
pub fn calibrate(
    dev: &JoinedDataset,
    layout: IntervalLayout,
    grid_step: f64,
) -> Result<FusionCalibration> {
    let steps = grid_steps(grid_step)?;
    let triples = dev_triples(dev)?;

    let mut bins: [Vec<Triple>; NUM_BINS] = Default::default();
    for t in &triples {
        bins[layout.bin_index(t.1)?].push(*t);
    }
    let (global, _) = grid_argmin(&triples, steps);

    let fitted: Vec<f64> = bins
        .par_iter()
        .map(|rows| {
            if rows.is_empty() {
                global
            } else {
                grid_argmin(rows, steps).0
            }
        })
        .collect();

    let mut calib = FusionCalibration {
        layout,
        weights: fitted.try_into().expect("one weight per bin"),
        grid_step,
        dev_rmse: f64::NAN,
        per_bin_counts: std::array::from_fn(|k| bins[k].len()),
    };
    let fused: Vec<f64> = triples
        .iter()
        .map(|&(a, b, _)| fuse_one(a, b, &calib))
        .collect::<Result<_>>()?;
    let refs: Vec<f64> = triples.iter().map(|t| t.2).collect();
    calib.dev_rmse = metrics::rmse(&fused, &refs)?;
    Ok(calib)
}

/// Fused RMSE restricted to each interval of `data`; `None` for empty bins.
pub fn per_bin_rmse(
    data: &JoinedDataset,
    calib: &FusionCalibration,
) -> Result<[Option<f64>; NUM_BINS]> {
    let mut sse = [0.0; NUM_BINS];
    let mut count = [0usize; NUM_BINS];
    for (row, r) in data.rows().iter().zip(data.references()?) {
        let k = calib.layout.bin_index(row.mllm)?;
        let e = fuse_one(row.w2v, row.mllm, calib)? - r;
        sse[k] += e * e;
        count[k] += 1;
    }
    Ok(std::array::from_fn(|k| {
        (count[k] > 0).then(|| (sse[k] / count[k] as f64).sqrt())
    }))
}

/// Per-speaker mean of the four part scores, sorted by speaker.
pub fn aggregate_overall(per_part: &[ScoredRecord]) -> Result<Vec<ScoredRecord>> {
    let mut by_speaker: BTreeMap<&str, [Option<f64>; 4]> = BTreeMap::new();
    for rec in per_part {
        let part = rec
            .part
            .ok_or_else(|| Error::InvalidPart(part_label(None)))?;
        let slot = Part::ALL
            .iter()
            .position(|&p| p == part)
            .expect("known part");
        let entry = by_speaker.entry(&rec.speaker_id).or_default();
        if entry[slot].replace(rec.score).is_some() {
            return Err(Error::DuplicatePart {
                speaker: rec.speaker_id.clone(),
                part: part.to_string(),
            });
        }
    }
    by_speaker
        .into_iter()
        .map(|(speaker, scores)| {
            let mut sum = 0.0;
            for (slot, score) in scores.iter().enumerate() {
                sum += score.ok_or_else(|| Error::MissingPart {
                    speaker: speaker.to_string(),
                    part: Part::ALL[slot].to_string(),
                })?;
            }
            Ok(ScoredRecord::overall(speaker, sum / 4.0))
        })
        .collect()
}

/// Speakers lacking at least one part, with the missing parts.
pub fn incomplete_speakers(per_part: &[ScoredRecord]) -> Vec<(String, Vec<Part>)> {
    let mut seen: BTreeMap<&str, Vec<Part>> = BTreeMap::new();
    for rec in per_part {
        let parts = seen.entry(&rec.speaker_id).or_default();
        if let Some(p) = rec.part {
            parts.push(p);
        }
    }
    seen.into_iter()
        .filter_map(|(s, parts)| {
            let missing: Vec<Part> = Part::ALL
                .into_iter()
                .filter(|p| !parts.contains(p))
                .collect();
            (!missing.is_empty()).then(|| (s.to_string(), missing))
        })
        .collect()
}
