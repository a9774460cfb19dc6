//! `sla`: evaluate, calibrate, fuse and aggregate grader predictions, train
//! the toy speech-grader head, and generate synthetic data.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};
use sla_core::fusion::{self, IntervalLayout, NUM_BINS};
use sla_core::head::{self, HeadMode, TrainConfig};
use sla_core::io::{self, CalibrationFile, Provenance};
use sla_core::report::{self, Format, ReportRow};
use sla_core::score::{self, Part, RecordKind, ScoredRecord};
use sla_core::synth::{self, SynthConfig};
use sla_core::{metrics, Error};

#[derive(Parser)]
#[command(
    name = "sla",
    version,
    about = "Two-grader spoken language assessment scoring"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score predictions against references (RMSE, PCC, SRC, %<=0.5, %<=1.0).
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Row label in the rendered table.
        #[arg(long)]
        name: Option<String>,
        #[arg(long, default_value = "table")]
        format: Format,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit per-interval fusion weights on a dev set.
    Calibrate {
        #[arg(long)]
        w2v: PathBuf,
        #[arg(long)]
        mllm: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long, default_value_t = fusion::DEFAULT_GRID_STEP)]
        grid_step: f64,
        /// Seed of the data the calibration was fitted on, recorded for provenance.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply a calibration file to two prediction files.
    Fuse {
        #[arg(long)]
        w2v: PathBuf,
        #[arg(long)]
        mllm: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        /// Clamp fused scores to [2.0, 5.5].
        #[arg(long)]
        clamp: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Average the four part scores of every speaker.
    Aggregate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        clamp: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the attention-pooling prototype head on feature files.
    TrainHead(TrainArgs),
    /// Generate synthetic grader predictions, references and frame features.
    Synth(SynthArgs),
    /// Render a results table from precomputed rows and/or prediction files.
    Report {
        /// CSV with header system,rmse,pcc,src,within_half,within_one.
        #[arg(long)]
        rows: Option<PathBuf>,
        /// NAME=PATH of a prediction file to score against --ref.
        #[arg(long = "system")]
        systems: Vec<String>,
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        #[arg(long, default_value = "table")]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long = "train")]
    train_path: PathBuf,
    #[arg(long = "dev")]
    dev_path: PathBuf,
    #[arg(long, default_value = "classification")]
    mode: HeadMode,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 600)]
    warmup: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    #[arg(long, default_value_t = 16)]
    attn_dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Best parameters, written as JSON.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch history log.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 100)]
    n_speakers: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `default` (σ=0.4 everywhere) or `heteroscedastic`.
    #[arg(long, default_value = "default")]
    preset: String,
    /// One σ or eight comma-separated per-bin σ values; overrides the preset.
    #[arg(long)]
    w2v_noise: Option<String>,
    #[arg(long)]
    mllm_noise: Option<String>,
    /// Comma-separated part ids.
    #[arg(long, default_value = "1,3,4,5")]
    parts: String,
    /// Eight comma-separated level weights for 2.0..5.5.
    #[arg(long)]
    level_weights: Option<String>,
    /// Utterances per class for train.feat; dev.feat gets half. 0 skips features.
    #[arg(long, default_value_t = 0)]
    frames_per_class: usize,
    #[arg(long, default_value = "2.0,3.5,5.0")]
    levels: String,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 8.0)]
    separation: f64,
}

fn exit_code(err: &Error) -> ExitCode {
    if err.is_parse_or_io() {
        ExitCode::from(3)
    } else {
        ExitCode::from(2)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Evaluate {
            pred,
            reference,
            name,
            format,
            out,
        } => evaluate(&pred, &reference, name, format, out.as_deref()),
        Command::Calibrate {
            w2v,
            mllm,
            reference,
            grid_step,
            seed,
            out,
        } => calibrate(&w2v, &mllm, &reference, grid_step, seed, &out),
        Command::Fuse {
            w2v,
            mllm,
            calib,
            clamp,
            out,
        } => fuse(&w2v, &mllm, &calib, clamp, &out),
        Command::Aggregate { pred, clamp, out } => aggregate(&pred, clamp, &out),
        Command::TrainHead(args) => train_head(&args),
        Command::Synth(args) => generate(&args),
        Command::Report {
            rows,
            systems,
            reference,
            format,
            out,
        } => render_report(
            rows.as_deref(),
            &systems,
            reference.as_deref(),
            format,
            out.as_deref(),
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code(&err)
        }
    }
}

fn score_file(pred: &Path, reference: &Path) -> Result<metrics::MetricReport, Error> {
    let pred = io::read_predictions(pred, RecordKind::Prediction)?;
    let refs = io::read_predictions(reference, RecordKind::Reference)?;
    let aligned = score::align(&pred, &refs)?;
    metrics::full_report(&aligned.predictions, &aligned.references)
}

fn evaluate(
    pred: &Path,
    reference: &Path,
    name: Option<String>,
    format: Format,
    out: Option<&Path>,
) -> Result<(), Error> {
    let metrics = score_file(pred, reference)?;
    print!(
        "{}",
        report::render(
            &[ReportRow {
                system: name,
                metrics
            }],
            format
        )
    );
    if let Some(out) = out {
        let json = serde_json::to_string_pretty(&metrics).expect("serialisable") + "\n";
        io::write_text(out, &json)?;
    }
    Ok(())
}

fn digest(path: &Path) -> Result<String, Error> {
    let bytes = fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn read_pair(w2v: &Path, mllm: &Path) -> Result<(Vec<ScoredRecord>, Vec<ScoredRecord>), Error> {
    Ok((
        io::read_predictions(w2v, RecordKind::Prediction)?,
        io::read_predictions(mllm, RecordKind::Prediction)?,
    ))
}

fn calibrate(
    w2v_path: &Path,
    mllm_path: &Path,
    ref_path: &Path,
    grid_step: f64,
    seed: Option<u64>,
    out: &Path,
) -> Result<(), Error> {
    let (w2v, mllm) = read_pair(w2v_path, mllm_path)?;
    let refs = io::read_predictions(ref_path, RecordKind::Reference)?;
    let dev = score::join(&w2v, &mllm, Some(&refs))?.dataset;
    let calib = fusion::calibrate(&dev, IntervalLayout::default(), grid_step)?;
    let bin_rmse = fusion::per_bin_rmse(&dev, &calib)?;

    println!(
        "{:<14} {:>6} {:>6} {:>8}",
        "interval", "count", "weight", "rmse"
    );
    for (k, bin) in bin_rmse.iter().enumerate() {
        let rmse = bin.map_or_else(|| "-".to_string(), |r| format!("{r:.4}"));
        println!(
            "{:<14} {:>6} {:>6.2} {:>8}",
            calib.layout.describe(k),
            calib.per_bin_counts[k],
            calib.weights[k],
            rmse
        );
    }
    println!("dev rmse {:.4} over {} rows", calib.dev_rmse, dev.len());

    let mut provenance = Provenance {
        seed,
        ..Default::default()
    };
    for (role, path) in [
        ("w2v", w2v_path),
        ("mllm", mllm_path),
        ("references", ref_path),
    ] {
        provenance.inputs.insert(role.to_string(), digest(path)?);
    }
    io::write_calibration(out, &CalibrationFile::new(&calib, provenance))
}

fn fuse(w2v: &Path, mllm: &Path, calib: &Path, clamp: bool, out: &Path) -> Result<(), Error> {
    let calib = io::read_calibration(calib)?.calibration()?;
    let (w2v, mllm) = read_pair(w2v, mllm)?;
    let data = score::join(&w2v, &mllm, None)?.dataset;
    // join output is already sorted by (speaker, part)
    let fused = fusion::fuse_dataset(&data, &calib, clamp)?;
    io::write_predictions(out, &fused)?;
    println!("fused {} rows", fused.len());
    Ok(())
}

fn aggregate(pred: &Path, clamp: bool, out: &Path) -> Result<(), Error> {
    let records = io::read_predictions(pred, RecordKind::Prediction)?;
    let incomplete = fusion::incomplete_speakers(&records);
    if !incomplete.is_empty() {
        for (speaker, parts) in &incomplete {
            let parts: Vec<String> = parts.iter().map(Part::to_string).collect();
            eprintln!("speaker {speaker} is missing part(s) {}", parts.join(", "));
        }
    }
    let mut overall = fusion::aggregate_overall(&records)?;
    if clamp {
        for r in &mut overall {
            r.score = r.score.clamp(score::MIN_LEVEL, score::MAX_LEVEL);
        }
    }
    io::write_predictions(out, &overall)?;
    println!("aggregated {} speakers", overall.len());
    Ok(())
}

fn train_head(args: &TrainArgs) -> Result<(), Error> {
    let train = io::read_features(&args.train_path)?;
    let dev = io::read_features(&args.dev_path)?;
    let config = TrainConfig {
        epochs: args.epochs,
        learning_rate: args.lr,
        warmup_steps: args.warmup,
        seed: args.seed,
        mode: args.mode,
        batch_size: args.batch_size,
        weight_decay: args.weight_decay,
        attn_dim: args.attn_dim,
    };
    let outcome = head::train(&train, &dev, &config)?;
    let log = report::format_history(&outcome);
    print!("{log}");
    if let Some(path) = &args.log {
        io::write_text(path, &log)?;
    }
    io::write_parameters(&args.out, &outcome.best)
}

fn parse_list(s: &str) -> Result<Vec<f64>, Error> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidConfig(format!("invalid number {v:?}")))
        })
        .collect()
}

fn per_bin(s: &str) -> Result<[f64; NUM_BINS], Error> {
    let values = parse_list(s)?;
    match values.len() {
        1 => Ok([values[0]; NUM_BINS]),
        NUM_BINS => Ok(values.try_into().expect("length checked")),
        n => Err(Error::InvalidConfig(format!(
            "expected 1 or {NUM_BINS} values, got {n}"
        ))),
    }
}

fn generate(args: &SynthArgs) -> Result<(), Error> {
    let mut cfg = match args.preset.as_str() {
        "default" => SynthConfig {
            n_speakers: args.n_speakers,
            seed: args.seed,
            ..Default::default()
        },
        "heteroscedastic" => SynthConfig::heteroscedastic(args.n_speakers, args.seed),
        other => return Err(Error::InvalidConfig(format!("unknown preset {other:?}"))),
    };
    if let Some(s) = &args.w2v_noise {
        cfg.w2v_noise = per_bin(s)?;
    }
    if let Some(s) = &args.mllm_noise {
        cfg.mllm_noise = per_bin(s)?;
    }
    if let Some(s) = &args.level_weights {
        let w = parse_list(s)?;
        cfg.level_distribution = w
            .try_into()
            .map_err(|_| Error::InvalidConfig(format!("expected {NUM_BINS} level weights")))?;
    }
    cfg.parts = args
        .parts
        .split(',')
        .map(|p| {
            score::parse_part_label(p.trim())?.ok_or_else(|| Error::InvalidPart(p.to_string()))
        })
        .collect::<Result<_, _>>()?;

    let data = synth::generate_scores(&cfg)?;
    fs::create_dir_all(&args.out_dir)
        .map_err(|e| Error::Io(format!("{}: {e}", args.out_dir.display())))?;
    let (w2v, mllm, refs) = data.projections();
    let refs = refs.expect("synthetic data has references");
    io::write_predictions(&args.out_dir.join("w2v.csv"), &w2v)?;
    io::write_predictions(&args.out_dir.join("mllm.csv"), &mllm)?;
    io::write_predictions(&args.out_dir.join("ref.csv"), &refs)?;

    let reference = data.references()?;
    println!("rows {} speakers {}", data.len(), cfg.n_speakers);
    println!(
        "w2v rmse {:.4}",
        metrics::rmse(&data.w2v_scores(), &reference)?
    );
    println!(
        "mllm rmse {:.4}",
        metrics::rmse(&data.mllm_scores(), &reference)?
    );
    for level in score::reference_levels() {
        let n = reference.iter().filter(|&&r| r == level).count();
        println!("level {level:.1}: {n}");
    }

    if args.frames_per_class > 0 {
        let levels = parse_list(&args.levels)?;
        let train = synth::generate_frames(
            args.frames_per_class,
            &levels,
            args.dim,
            args.separation,
            args.seed,
        )?;
        let dev_per_class = args.frames_per_class.div_ceil(2);
        let dev = synth::generate_frames(
            dev_per_class,
            &levels,
            args.dim,
            args.separation,
            args.seed + 1,
        )?;
        io::write_features(&args.out_dir.join("train.feat"), &train)?;
        io::write_features(&args.out_dir.join("dev.feat"), &dev)?;
        println!(
            "features: {} train, {} dev utterances",
            train.len(),
            dev.len()
        );
    }
    Ok(())
}

fn render_report(
    rows: Option<&Path>,
    systems: &[String],
    reference: Option<&Path>,
    format: Format,
    out: Option<&Path>,
) -> Result<(), Error> {
    let mut table = match rows {
        Some(path) => report::parse_leaderboard(&io::read_text(path)?)?,
        None => Vec::new(),
    };
    for entry in systems {
        let (name, path) = entry.split_once('=').ok_or_else(|| {
            Error::InvalidConfig(format!("--system expects NAME=PATH, got {entry:?}"))
        })?;
        let reference =
            reference.ok_or_else(|| Error::InvalidConfig("--system requires --ref".into()))?;
        table.push(ReportRow {
            system: Some(name.to_string()),
            metrics: score_file(Path::new(path), reference)?,
        });
    }
    if table.is_empty() {
        return Err(Error::InvalidConfig(
            "nothing to report; pass --rows or --system".into(),
        ));
    }
    let text = report::render(&table, format);
    print!("{text}");
    if let Some(out) = out {
        io::write_text(out, &text)?;
    }
    Ok(())
}
