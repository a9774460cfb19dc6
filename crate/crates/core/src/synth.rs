//! Synthetic score and frame generators, plus brute-force oracles used to
//! check calibration and training without a real corpus.

use ndarray::{Array1, Array2};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{grid_steps, IntervalLayout, NUM_BINS};
use crate::head::FrameSequence;
use crate::score::{reference_levels, JoinedDataset, JoinedRow, Part};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_speakers: usize,
    pub parts: Vec<Part>,
    /// Noise σ of the speech grader, indexed by the bin of the reference.
    pub w2v_noise: [f64; NUM_BINS],
    pub mllm_noise: [f64; NUM_BINS],
    pub seed: u64,
    /// Relative weights of the eight reference levels.
    pub level_distribution: [f64; NUM_BINS],
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_speakers: 100,
            parts: Part::ALL.to_vec(),
            w2v_noise: [0.4; NUM_BINS],
            mllm_noise: [0.4; NUM_BINS],
            seed: 0,
            level_distribution: [1.0; NUM_BINS],
        }
    }
}

impl SynthConfig {
    /// Multimodal grader accurate (σ = 0.1) on the upper four bins, speech
    /// grader accurate on the lower four, σ = 0.6 elsewhere.
    pub fn heteroscedastic(n_speakers: usize, seed: u64) -> Self {
        let low = |k: usize| k < 4;
        SynthConfig {
            n_speakers,
            w2v_noise: std::array::from_fn(|k| if low(k) { 0.1 } else { 0.6 }),
            mllm_noise: std::array::from_fn(|k| if low(k) { 0.6 } else { 0.1 }),
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n_speakers == 0 {
            return bad("n_speakers must be positive".into());
        }
        if self.parts.is_empty() {
            return bad("at least one part is required".into());
        }
        let mut parts = self.parts.clone();
        parts.sort();
        parts.dedup();
        if parts.len() != self.parts.len() {
            return bad("parts must be distinct".into());
        }
        if self
            .w2v_noise
            .iter()
            .chain(&self.mllm_noise)
            .any(|s| !(s.is_finite() && *s >= 0.0))
        {
            return bad("noise levels must be finite and non-negative".into());
        }
        let weights = &self.level_distribution;
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0))
            || weights.iter().all(|w| *w == 0.0)
        {
            return bad("level distribution must be non-negative and not all zero".into());
        }
        Ok(())
    }
}

/// Draws references from the level distribution and adds per-bin Gaussian
/// noise for each grader. Rows are ordered by speaker then part.
pub fn generate_scores(cfg: &SynthConfig) -> Result<JoinedDataset> {
    cfg.validate()?;
    let layout = IntervalLayout::default();
    let levels = reference_levels();
    let pick = WeightedIndex::new(cfg.level_distribution)
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut parts = cfg.parts.clone();
    parts.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let width = cfg.n_speakers.to_string().len().max(4);
    let mut rows = Vec::with_capacity(cfg.n_speakers * parts.len());
    for s in 0..cfg.n_speakers {
        let speaker = format!("spk{s:0width$}");
        for &part in &parts {
            let reference = levels[pick.sample(&mut rng)];
            let bin = layout.bin_index(reference)?;
            let w2v_eps: f64 = rng.sample(StandardNormal);
            let mllm_eps: f64 = rng.sample(StandardNormal);
            rows.push(JoinedRow {
                speaker_id: speaker.clone(),
                part: Some(part),
                w2v: reference + cfg.w2v_noise[bin] * w2v_eps,
                mllm: reference + cfg.mllm_noise[bin] * mllm_eps,
                reference: Some(reference),
            });
        }
    }
    JoinedDataset::new(rows)
}

/// Class-conditional Gaussian frame sequences.
///
/// Class `k` frames are drawn from `N((k + 1) * separation * v, I)` with
/// `v` the unit diagonal direction, so neighbouring class means sit exactly
/// `separation` apart. Sequence lengths are uniform in [5, 20]. Output is
/// grouped by class in `levels` order.
pub fn generate_frames(
    n_per_class: usize,
    levels: &[f64],
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Vec<FrameSequence>> {
    if !(separation.is_finite() && separation >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "separation must be >= 0, got {separation}"
        )));
    }
    if dim == 0 || n_per_class == 0 || levels.is_empty() {
        return Err(Error::InvalidConfig(
            "dimension, class size and level list must be non-empty".into(),
        ));
    }
    let unit = 1.0 / (dim as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_per_class * levels.len());
    for (k, &level) in levels.iter().enumerate() {
        let offset = (k + 1) as f64 * separation * unit;
        for _ in 0..n_per_class {
            let t = rng.random_range(5..=20);
            let frames = Array2::from_shape_simple_fn((t, dim), || {
                offset + rng.sample::<f64, _>(StandardNormal)
            });
            out.push(FrameSequence::new(frames, Some(level))?);
        }
    }
    Ok(out)
}

/// Classifies each test sequence by the nearest class centroid of the
/// per-utterance mean frames in `train`. Returns predicted levels.
pub fn nearest_class_mean(train: &[FrameSequence], test: &[FrameSequence]) -> Result<Vec<f64>> {
    let mut centroids: Vec<(f64, Array1<f64>, usize)> = Vec::new();
    for seq in train {
        let label = seq
            .label()
            .ok_or_else(|| Error::InvalidConfig("training sequence without label".into()))?;
        let mean = seq.mean_frame();
        match centroids.iter_mut().find(|(l, _, _)| *l == label) {
            Some((_, sum, n)) => {
                *sum += &mean;
                *n += 1;
            }
            None => centroids.push((label, mean, 1)),
        }
    }
    if centroids.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for (_, sum, n) in centroids.iter_mut() {
        *sum /= *n as f64;
    }
    test.iter()
        .map(|seq| {
            if seq.dim() != centroids[0].1.len() {
                return Err(Error::ShapeMismatch(
                    "test frames differ in dimension".into(),
                ));
            }
            let m = seq.mean_frame();
            let mut best = (f64::INFINITY, f64::NAN);
            for (label, c) in centroids.iter().map(|(l, c, _)| (*l, c)) {
                let dist: f64 = (&m - c).mapv(|v| v * v).sum();
                if dist < best.0 {
                    best = (dist, label);
                }
            }
            Ok(best.1)
        })
        .collect()
}

/// (w2v, mllm, reference) triples of the dev rows whose multimodal score
/// falls in `bin`.
pub fn rows_in_bin(
    data: &JoinedDataset,
    layout: &IntervalLayout,
    bin: usize,
) -> Result<Vec<(f64, f64, f64)>> {
    let mut out = Vec::new();
    for row in data.rows() {
        let reference = row.reference.ok_or(Error::NoReferences)?;
        if layout.bin_index(row.mllm)? == bin {
            out.push((row.w2v, row.mllm, reference));
        }
    }
    Ok(out)
}

/// Exhaustive scan of `w = 0, step, ..., 1`; returns the first weight with
/// minimal RMSE and that RMSE.
pub fn brute_force_bin_weight(rows: &[(f64, f64, f64)], grid_step: f64) -> Result<(f64, f64)> {
    if rows.is_empty() {
        return Err(Error::EmptyBin);
    }
    let steps = grid_steps(grid_step)?;
    let mut best_w = f64::NAN;
    let mut best_rmse = f64::INFINITY;
    for i in 0..=steps {
        let w = i as f64 / steps as f64;
        let mut sse = 0.0;
        for &(w2v, mllm, reference) in rows {
            let fused = (1.0 - w) * w2v + w * mllm;
            sse += (fused - reference) * (fused - reference);
        }
        let rmse = (sse / rows.len() as f64).sqrt();
        if rmse < best_rmse {
            best_w = w;
            best_rmse = rmse;
        }
    }
    Ok((best_w, best_rmse))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics;

    #[test]
    fn zero_noise_reproduces_references() {
        let cfg = SynthConfig {
            w2v_noise: [0.0; NUM_BINS],
            mllm_noise: [0.0; NUM_BINS],
            n_speakers: 20,
            ..Default::default()
        };
        let data = generate_scores(&cfg).unwrap();
        let refs = data.references().unwrap();
        assert_eq!(data.w2v_scores(), refs);
        assert_eq!(data.mllm_scores(), refs);
        assert_eq!(metrics::rmse(&data.w2v_scores(), &refs).unwrap(), 0.0);
        assert_eq!(data.len(), 80);
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let cfg = SynthConfig {
            seed: 42,
            ..Default::default()
        };
        assert_eq!(
            generate_scores(&cfg).unwrap(),
            generate_scores(&cfg).unwrap()
        );
        let other = SynthConfig {
            seed: 43,
            ..Default::default()
        };
        assert_ne!(
            generate_scores(&cfg).unwrap(),
            generate_scores(&other).unwrap()
        );
        let a = generate_frames(5, &[2.0, 3.0], 4, 1.0, 7).unwrap();
        assert_eq!(a, generate_frames(5, &[2.0, 3.0], 4, 1.0, 7).unwrap());
    }

    #[test]
    fn references_on_grid() {
        let data = generate_scores(&SynthConfig {
            n_speakers: 200,
            seed: 3,
            ..Default::default()
        })
        .unwrap();
        assert!(data
            .references()
            .unwrap()
            .iter()
            .all(|&r| crate::score::is_reference_level(r)));
    }

    #[test]
    fn invalid_configs() {
        let cfg = SynthConfig {
            level_distribution: [0.0; NUM_BINS],
            ..Default::default()
        };
        assert!(matches!(
            generate_scores(&cfg),
            Err(Error::InvalidConfig(_))
        ));
        let mut cfg = SynthConfig::default();
        cfg.w2v_noise[2] = -0.1;
        assert!(generate_scores(&cfg).is_err());
        let cfg = SynthConfig {
            parts: vec![],
            ..Default::default()
        };
        assert!(generate_scores(&cfg).is_err());
        assert!(generate_frames(5, &[2.0], 4, -1.0, 0).is_err());
    }

    #[test]
    fn frame_lengths_in_range() {
        let data = generate_frames(30, &[2.0, 3.0, 4.0], 3, 2.0, 1).unwrap();
        assert_eq!(data.len(), 90);
        assert!(data
            .iter()
            .all(|s| (5..=20).contains(&s.len()) && s.dim() == 3));
    }

    #[test]
    fn brute_force_examples() {
        let exact_mllm = [(3.4, 3.0, 3.0), (2.1, 4.0, 4.0)];
        assert_eq!(
            brute_force_bin_weight(&exact_mllm, 0.01).unwrap(),
            (1.0, 0.0)
        );
        let exact_w2v = [(3.0, 3.4, 3.0), (4.0, 2.1, 4.0)];
        assert_eq!(
            brute_force_bin_weight(&exact_w2v, 0.01).unwrap(),
            (0.0, 0.0)
        );
        assert_eq!(brute_force_bin_weight(&[], 0.01), Err(Error::EmptyBin));
        // both graders tie everywhere: first (smallest) weight wins
        assert_eq!(
            brute_force_bin_weight(&[(3.0, 3.0, 3.5)], 0.25).unwrap().0,
            0.0
        );
    }

    #[test]
    fn separation_zero_is_chance() {
        let levels = [2.0, 3.5, 5.0];
        let train = generate_frames(100, &levels, 8, 0.0, 11).unwrap();
        let test = generate_frames(100, &levels, 8, 0.0, 12).unwrap();
        let pred = nearest_class_mean(&train, &test).unwrap();
        let hits = pred
            .iter()
            .zip(&test)
            .filter(|(p, s)| Some(**p) == s.label())
            .count();
        let accuracy = hits as f64 / test.len() as f64;
        assert!((accuracy - 1.0 / 3.0).abs() <= 0.10, "accuracy {accuracy}");
    }

    #[test]
    fn separation_eight_is_separable() {
        let levels = [2.0, 3.5, 5.0];
        let train = generate_frames(50, &levels, 8, 8.0, 21).unwrap();
        let test = generate_frames(50, &levels, 8, 8.0, 22).unwrap();
        let pred = nearest_class_mean(&train, &test).unwrap();
        let refs: Vec<f64> = test.iter().map(|s| s.label().unwrap()).collect();
        assert!(metrics::macro_f1(&pred, &refs).unwrap() >= 0.95);
    }
}
