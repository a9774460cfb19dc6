//! Exit criteria. Each test prints one `[PASS]`/`[FAIL]` line; run with
//! `cargo test -p sla-core --test acceptance -- --nocapture` to see them.

mod common;

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sla_core::fusion::{self, FusionCalibration, IntervalLayout, NUM_BINS};
use sla_core::head::{self, HeadMode, TrainConfig};
use sla_core::io::{self, CalibrationFile, Provenance};
use sla_core::report::{self, ReportRow};
use sla_core::score::{Part, RecordKind, ScoredRecord};
use sla_core::synth::{self, SynthConfig};
use sla_core::{metrics, MetricReport};

type Outcome = Result<String, String>;

fn verdict(id: u32, title: &str, outcome: Outcome) {
    match outcome {
        Ok(detail) => println!("[PASS] criterion {id}: {title} ({detail})"),
        Err(detail) => {
            println!("[FAIL] criterion {id}: {title} ({detail})");
            panic!("criterion {id} failed: {detail}");
        }
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

// ---------------------------------------------------------------------------
// second, independent transcriptions of the metric formulas

mod oracle {
    pub fn rmse(p: &[f64], r: &[f64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..p.len() {
            acc += (r[i] - p[i]).powi(2);
        }
        (acc / p.len() as f64).sqrt()
    }

    /// Sample (n - 1) form via raw moments.
    pub fn pearson(p: &[f64], r: &[f64]) -> f64 {
        let n = p.len() as f64;
        let mx = p.iter().sum::<f64>() / n;
        let my = r.iter().sum::<f64>() / n;
        let sxy: f64 = p
            .iter()
            .zip(r)
            .map(|(x, y)| (x - mx) * (y - my))
            .sum::<f64>()
            / (n - 1.0);
        let sx = (p.iter().map(|x| (x - mx).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let sy = (r.iter().map(|y| (y - my).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        sxy / (sx * sy)
    }

    /// O(n^2) counting ranks: 1 + #less + (#equal - 1) / 2.
    pub fn ranks(v: &[f64]) -> Vec<f64> {
        v.iter()
            .map(|&x| {
                let less = v.iter().filter(|&&y| y < x).count() as f64;
                let equal = v.iter().filter(|&&y| y == x).count() as f64;
                1.0 + less + (equal - 1.0) / 2.0
            })
            .collect()
    }

    pub fn spearman(p: &[f64], r: &[f64]) -> f64 {
        pearson(&ranks(p), &ranks(r))
    }

    pub fn within(p: &[f64], r: &[f64], tol: f64) -> f64 {
        let hits = p
            .iter()
            .zip(r)
            .filter(|(x, y)| (*x - *y).abs() <= tol)
            .count();
        hits as f64 * 100.0 / p.len() as f64
    }

    fn snap(x: f64) -> usize {
        // class index 0..8 for levels 2.0..5.5
        let mut best = 0;
        for k in 0..8 {
            let level = 2.0 + 0.5 * k as f64;
            if x >= level - 0.25 {
                best = k;
            }
        }
        best
    }

    /// Confusion-matrix macro-F1, F1 = 2TP / (2TP + FP + FN).
    pub fn macro_f1(p: &[f64], r: &[f64]) -> f64 {
        let mut cm = [[0usize; 8]; 8];
        for (x, y) in p.iter().zip(r) {
            let truth = ((y - 2.0) * 2.0).round() as usize;
            cm[truth][snap(*x)] += 1;
        }
        let mut total = 0.0;
        let mut classes = 0;
        for (k, row) in cm.iter().enumerate() {
            let tp = row[k];
            let fn_: usize = row.iter().sum::<usize>() - tp;
            let fp: usize = (0..8).map(|j| cm[j][k]).sum::<usize>() - tp;
            if tp + fn_ + fp == 0 {
                continue;
            }
            classes += 1;
            total += 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
        }
        total / classes as f64
    }
}

#[test]
fn criterion_1_metric_oracle_equivalence() {
    let start = Instant::now();
    let outcome = (|| -> Outcome {
        let mut rng = ChaCha8Rng::seed_from_u64(2025);
        let mut worst = 0.0f64;
        for trial in 0..1000 {
            let n = 200;
            let sigma = rng.random_range(0.05..1.0);
            let r: Vec<f64> = (0..n)
                .map(|_| 2.0 + 0.5 * rng.random_range(0..8) as f64)
                .collect();
            let p: Vec<f64> = r
                .iter()
                .map(|y| {
                    let noise = rng.random_range(-1.0..1.0) * sigma * 2.0;
                    // quantise some predictions to create ties
                    if rng.random_bool(0.2) {
                        ((y + noise) * 4.0).round() / 4.0
                    } else {
                        y + noise
                    }
                })
                .collect();
            let pairs = [
                (metrics::rmse(&p, &r).unwrap(), oracle::rmse(&p, &r), "rmse"),
                (
                    metrics::pearson(&p, &r).unwrap(),
                    oracle::pearson(&p, &r),
                    "pearson",
                ),
                (
                    metrics::spearman(&p, &r).unwrap(),
                    oracle::spearman(&p, &r),
                    "spearman",
                ),
                (
                    metrics::within_tolerance(&p, &r, 0.5).unwrap(),
                    oracle::within(&p, &r, 0.5),
                    "within 0.5",
                ),
                (
                    metrics::within_tolerance(&p, &r, 1.0).unwrap(),
                    oracle::within(&p, &r, 1.0),
                    "within 1.0",
                ),
                (
                    metrics::macro_f1(&p, &r).unwrap(),
                    oracle::macro_f1(&p, &r),
                    "macro_f1",
                ),
            ];
            for (got, want, name) in pairs {
                let e = rel_err(got, want);
                ensure(e <= 1e-9, || {
                    format!("trial {trial}: {name} {got} vs oracle {want}")
                })?;
                worst = worst.max(e);
            }
        }
        let elapsed = start.elapsed();
        ensure(elapsed < Duration::from_secs(5), || {
            format!("took {elapsed:?}")
        })?;
        Ok(format!("worst rel err {worst:.1e}, {elapsed:.2?}"))
    })();
    verdict(1, "metric oracle equivalence", outcome);
}

fn random_config(rng: &mut ChaCha8Rng, seed: u64) -> SynthConfig {
    let mut parts: Vec<Part> = Part::ALL
        .into_iter()
        .filter(|_| rng.random_bool(0.7))
        .collect();
    if parts.is_empty() {
        parts.push(Part::Opinion);
    }
    let mut levels: [f64; NUM_BINS] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
    levels[rng.random_range(0..NUM_BINS)] += 0.1;
    SynthConfig {
        n_speakers: rng.random_range(2..150),
        parts,
        w2v_noise: std::array::from_fn(|_| rng.random_range(0.0..1.0)),
        mllm_noise: std::array::from_fn(|_| rng.random_range(0.0..1.0)),
        seed,
        level_distribution: levels,
    }
}

#[test]
fn criterion_2_fusion_dominance_and_brute_force_agreement() {
    let outcome = (|| -> Outcome {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let layout = IntervalLayout::default();
        let mut bins_checked = 0;
        for i in 0..100 {
            let cfg = random_config(&mut rng, 1000 + i);
            let dev = synth::generate_scores(&cfg).unwrap();
            let calib = fusion::calibrate(&dev, layout, 0.01).unwrap();
            let refs = dev.references().unwrap();
            let w2v = metrics::rmse(&dev.w2v_scores(), &refs).unwrap();
            let mllm = metrics::rmse(&dev.mllm_scores(), &refs).unwrap();
            ensure(calib.dev_rmse <= w2v.min(mllm), || {
                format!("config {i}: fused {} > min({w2v}, {mllm})", calib.dev_rmse)
            })?;
            for k in 0..NUM_BINS {
                let rows = synth::rows_in_bin(&dev, &layout, k).unwrap();
                let expected = if rows.is_empty() {
                    let all: Vec<_> = dev
                        .rows()
                        .iter()
                        .map(|r| (r.w2v, r.mllm, r.reference.unwrap()))
                        .collect();
                    synth::brute_force_bin_weight(&all, 0.01).unwrap().0
                } else {
                    bins_checked += 1;
                    synth::brute_force_bin_weight(&rows, 0.01).unwrap().0
                };
                ensure(calib.weights[k] == expected, || {
                    format!(
                        "config {i} bin {k}: calibrate {} vs brute force {expected}",
                        calib.weights[k]
                    )
                })?;
            }
        }
        Ok(format!("100 configs, {bins_checked} populated bins"))
    })();
    verdict(
        2,
        "fusion dominance and per-bin brute-force equality",
        outcome,
    );
}

#[test]
fn criterion_3_score_conditioned_advantage() {
    let outcome = (|| -> Outcome {
        let dev = synth::generate_scores(&SynthConfig::heteroscedastic(500, 31)).unwrap();
        let eval = synth::generate_scores(&SynthConfig::heteroscedastic(500, 32)).unwrap();
        let calib = fusion::calibrate(&dev, IntervalLayout::default(), 0.01).unwrap();
        let (global_w, global_rmse) = fusion::best_global_weight(&dev, 0.01).unwrap();
        let gain = 1.0 - calib.dev_rmse / global_rmse;
        ensure(gain >= 0.05, || {
            format!(
                "per-bin dev RMSE {:.4} vs global {global_rmse:.4} (w={global_w}): gain {gain:.3}",
                calib.dev_rmse
            )
        })?;

        let refs = eval.references().unwrap();
        let fused: Vec<f64> = fusion::fuse_dataset(&eval, &calib, false)
            .unwrap()
            .iter()
            .map(|r| r.score)
            .collect();
        let fused_rmse = metrics::rmse(&fused, &refs).unwrap();
        let w2v = metrics::rmse(&eval.w2v_scores(), &refs).unwrap();
        let mllm = metrics::rmse(&eval.mllm_scores(), &refs).unwrap();
        ensure(fused_rmse < w2v && fused_rmse < mllm, || {
            format!("eval fused {fused_rmse:.4} vs w2v {w2v:.4}, mllm {mllm:.4}")
        })?;
        let high = calib.weights[5..].iter().all(|&w| w > 0.5);
        let low = calib.weights[..2].iter().all(|&w| w < 0.5);
        ensure(high && low, || {
            format!(
                "weights do not track the better grader: {:?}",
                calib.weights
            )
        })?;
        Ok(format!(
            "dev per-bin {:.4} vs global {global_rmse:.4} ({:.1}% lower); eval fused {fused_rmse:.4} < w2v {w2v:.4}, mllm {mllm:.4}; weights {:?}",
            calib.dev_rmse,
            100.0 * gain,
            calib.weights
        ))
    })();
    verdict(3, "score-conditioned advantage", outcome);
}

#[test]
fn criterion_4_gradient_correctness() {
    let start = Instant::now();
    let outcome = (|| -> Outcome {
        let mut worst = (0.0f64, "");
        for seed in 0..100 {
            let inst = common::random_instance(seed, 8, 5, 10);
            let (err, name) = common::max_gradient_error(&inst);
            ensure(err < 1e-4, || {
                format!("instance {seed}: {name} relative error {err:e}")
            })?;
            if err > worst.0 {
                worst = (err, name);
            }
        }
        let elapsed = start.elapsed();
        ensure(elapsed < Duration::from_secs(30), || {
            format!("took {elapsed:?}")
        })?;
        Ok(format!(
            "worst {:.1e} in {}, {elapsed:.2?}",
            worst.0, worst.1
        ))
    })();
    verdict(4, "gradient correctness", outcome);
}

#[test]
fn criterion_5_toy_training() {
    let start = Instant::now();
    let outcome = (|| -> Outcome {
        let levels = [2.0, 3.5, 5.0];
        let mut train = synth::generate_frames(67, &levels, 8, 8.0, 501).unwrap();
        train.truncate(200);
        let mut dev = synth::generate_frames(34, &levels, 8, 8.0, 502).unwrap();
        dev.truncate(100);
        let refs: Vec<f64> = dev.iter().map(|s| s.label().unwrap()).collect();
        let oracle = synth::nearest_class_mean(&train, &dev).unwrap();
        let oracle_f1 = metrics::macro_f1(&oracle, &refs).unwrap();
        ensure(oracle_f1 >= 0.95, || {
            format!("nearest-class-mean oracle F1 {oracle_f1}")
        })?;

        let cfg = TrainConfig {
            epochs: 30,
            learning_rate: 1e-2,
            warmup_steps: 25,
            seed: 11,
            mode: HeadMode::Classification,
            batch_size: 8,
            weight_decay: 0.01,
            attn_dim: 8,
        };
        let out = head::train(&train, &dev, &cfg).unwrap();
        let best = out.history[out.best_epoch - 1].dev_macro_f1;
        ensure(best >= 0.9, || format!("best dev macro-F1 {best}"))?;
        let elapsed = start.elapsed();
        ensure(elapsed < Duration::from_secs(120), || {
            format!("took {elapsed:?}")
        })?;
        Ok(format!(
            "oracle {oracle_f1:.3}, head {best:.3} at epoch {}, {elapsed:.2?}",
            out.best_epoch
        ))
    })();
    verdict(5, "toy training", outcome);
}

#[test]
fn criterion_6_fusion_and_aggregation_exactness() {
    let outcome = (|| -> Outcome {
        let recs: Vec<ScoredRecord> = Part::ALL
            .iter()
            .zip([3.0, 3.0, 4.0, 4.0])
            .map(|(&p, s)| ScoredRecord::new("spk", p, s))
            .collect();
        let overall = fusion::aggregate_overall(&recs).unwrap()[0].score;
        ensure(overall == 3.5, || format!("overall {overall}"))?;

        let layout = IntervalLayout::default();
        let zero = FusionCalibration::with_weights(layout, [0.0; NUM_BINS], 0.01).unwrap();
        let one = FusionCalibration::with_weights(layout, [1.0; NUM_BINS], 0.01).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..1000 {
            let a: f64 = rng.random_range(-1.0..7.0);
            let b: f64 = rng.random_range(-1.0..7.0);
            let f0 = fusion::fuse_one(a, b, &zero).unwrap();
            let f1 = fusion::fuse_one(a, b, &one).unwrap();
            ensure(
                f0.to_bits() == a.to_bits() && f1.to_bits() == b.to_bits(),
                || format!("endpoints not exact for ({a}, {b}): {f0}, {f1}"),
            )?;
        }
        let bins = (
            layout.bin_index(2.25).unwrap(),
            layout.bin_index(6.0).unwrap(),
        );
        ensure(bins == (1, 7), || format!("bins {bins:?}"))?;
        Ok("overall 3.5, endpoints bit-exact, 2.25->1, 6.0->7".into())
    })();
    verdict(6, "aggregation and fusion exactness", outcome);
}

#[test]
fn criterion_7_determinism_and_round_trips() {
    let outcome = (|| -> Outcome {
        // synthetic datasets
        let cfg = SynthConfig {
            n_speakers: 50,
            seed: 77,
            ..Default::default()
        };
        let files = |cfg: &SynthConfig| {
            let data = synth::generate_scores(cfg).unwrap();
            let (w, m, r) = data.projections();
            [w, m, r.unwrap()].map(|recs| io::format_predictions(&recs))
        };
        let first = files(&cfg);
        ensure(first == files(&cfg), || {
            "synthetic score files differ between runs".into()
        })?;
        for (text, kind) in first.iter().zip([
            RecordKind::Prediction,
            RecordKind::Prediction,
            RecordKind::Reference,
        ]) {
            let back = io::format_predictions(&io::parse_predictions(text, kind).unwrap());
            ensure(&back == text, || {
                "prediction file did not round-trip".into()
            })?;
        }

        // calibration files
        let calib_text = || {
            let dev = synth::generate_scores(&cfg).unwrap();
            let calib = fusion::calibrate(&dev, IntervalLayout::default(), 0.01).unwrap();
            let mut prov = Provenance {
                seed: Some(77),
                ..Default::default()
            };
            prov.inputs.insert("w2v".into(), "0".repeat(64));
            CalibrationFile::new(&calib, prov).to_text()
        };
        let c1 = calib_text();
        ensure(c1 == calib_text(), || {
            "calibration files differ between runs".into()
        })?;
        ensure(
            CalibrationFile::from_text(&c1).unwrap().to_text() == c1,
            || "calibration did not round-trip".into(),
        )?;

        // feature files and training logs
        let frames = synth::generate_frames(10, &[2.0, 4.0], 4, 3.0, 5).unwrap();
        let feat = io::format_features(&frames);
        ensure(
            io::format_features(&synth::generate_frames(10, &[2.0, 4.0], 4, 3.0, 5).unwrap())
                == feat,
            || "feature files differ between runs".into(),
        )?;
        ensure(
            io::format_features(&io::parse_features(&feat).unwrap()) == feat,
            || "features did not round-trip".into(),
        )?;

        let cfg = TrainConfig {
            epochs: 3,
            learning_rate: 1e-2,
            warmup_steps: 5,
            ..Default::default()
        };
        let run = || head::train(&frames, &frames, &cfg).unwrap();
        let (a, b) = (run(), run());
        ensure(
            report::format_history(&a) == report::format_history(&b),
            || "training logs differ".into(),
        )?;
        let params = io::format_parameters(&a.best);
        ensure(params == io::format_parameters(&b.best), || {
            "parameter files differ".into()
        })?;
        ensure(
            io::format_parameters(&io::parse_parameters(&params).unwrap()) == params,
            || "parameter file did not round-trip".into(),
        )?;
        Ok("scores, calibration, features, parameters and logs byte-identical".into())
    })();
    verdict(7, "determinism and round-trips", outcome);
}

#[test]
fn criterion_8_report_fidelity() {
    let outcome = (|| -> Outcome {
        let table = "system,rmse,pcc,src,within_half,within_one\n\
                     perezoso (1),0.364,0.826,0.830,83.0,99.7\n\
                     NTNU SMIL V (2),0.375,0.820,0.827,82.7,99.3\n\
                     nhanphan (3),0.384,0.801,0.815,81.3,99.3\n\
                     NTNU SMIL X (4),0.389,0.808,0.810,78.3,98.0\n\
                     Baseline (25),0.440,0.726,0.727,73.7,96.7\n";
        let rows = report::parse_leaderboard(table).unwrap();
        let line = report::format_values(&rows[1].metrics);
        ensure(line == "0.375 0.820 0.827 82.7 99.3", || {
            format!("rendered {line:?}")
        })?;
        let named = report::format_row(&rows[1]);
        ensure(
            named == "NTNU SMIL V (2) 0.375 0.820 0.827 82.7 99.3",
            || format!("rendered {named:?}"),
        )?;
        let rendered = report::render(
            &[ReportRow {
                system: None,
                metrics: MetricReport::precomputed(0.394, 0.790, 0.797, 81.3, 99.3),
            }],
            report::Format::Table,
        );
        ensure(
            rendered.lines().nth(1) == Some("0.394 0.790 0.797 81.3 99.3"),
            || rendered.clone(),
        )?;
        Ok(line)
    })();
    verdict(8, "report fidelity", outcome);
}
