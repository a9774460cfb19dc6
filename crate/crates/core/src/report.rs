//! Leaderboard-style rendering of metric rows and training histories.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::head::TrainOutcome;
use crate::metrics::MetricReport;

pub const COLUMNS: [&str; 5] = ["RMSE", "PCC", "SRC", "%<=0.5", "%<=1.0"];
pub const LEADERBOARD_HEADER: [&str; 6] =
    ["system", "rmse", "pcc", "src", "within_half", "within_one"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Format {
    #[default]
    Table,
    Csv,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table" => Ok(Format::Table),
            "csv" => Ok(Format::Csv),
            other => Err(Error::InvalidConfig(format!("unknown format {other:?}"))),
        }
    }
}

/// A named (or anonymous) row of the results table.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub system: Option<String>,
    pub metrics: MetricReport,
}

impl MetricReport {
    /// A report built from already-published numbers; `n` is unknown (0).
    pub fn precomputed(rmse: f64, pcc: f64, src: f64, within_half: f64, within_one: f64) -> Self {
        MetricReport {
            rmse,
            pcc,
            src,
            within_half,
            within_one,
            n: 0,
        }
    }
}

/// The five values, three decimals for RMSE and correlations, one for
/// percentages.
pub fn format_values(m: &MetricReport) -> String {
    format!(
        "{:.3} {:.3} {:.3} {:.1} {:.1}",
        m.rmse, m.pcc, m.src, m.within_half, m.within_one
    )
}

pub fn format_row(row: &ReportRow) -> String {
    match &row.system {
        Some(name) => format!("{name} {}", format_values(&row.metrics)),
        None => format_values(&row.metrics),
    }
}

pub fn render(rows: &[ReportRow], format: Format) -> String {
    let mut out = String::new();
    match format {
        Format::Table => {
            let named = rows.iter().any(|r| r.system.is_some());
            if named {
                out.push_str("System ");
            }
            writeln!(out, "{}", COLUMNS.join(" ")).unwrap();
            for row in rows {
                writeln!(out, "{}", format_row(row)).unwrap();
            }
        }
        Format::Csv => {
            writeln!(out, "{}", LEADERBOARD_HEADER.join(",")).unwrap();
            for row in rows {
                let m = &row.metrics;
                let mut w = csv::Writer::from_writer(Vec::new());
                w.write_record([
                    row.system.clone().unwrap_or_default(),
                    format!("{:.3}", m.rmse),
                    format!("{:.3}", m.pcc),
                    format!("{:.3}", m.src),
                    format!("{:.1}", m.within_half),
                    format!("{:.1}", m.within_one),
                ])
                .expect("in-memory write");
                out.push_str(&String::from_utf8(w.into_inner().expect("flush")).expect("utf-8"));
            }
        }
    }
    out
}

/// Reads precomputed rows: `system,rmse,pcc,src,within_half,within_one`.
pub fn parse_leaderboard(text: &str) -> Result<Vec<ReportRow>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| Error::Parse(e.to_string()))?;
    if header.iter().ne(LEADERBOARD_HEADER) {
        return Err(Error::Parse(format!(
            "expected header `{}`",
            LEADERBOARD_HEADER.join(",")
        )));
    }
    reader
        .records()
        .enumerate()
        .map(|(i, rec)| {
            let rec = rec.map_err(|e| Error::Parse(format!("line {}: {e}", i + 2)))?;
            let num = |k: usize| -> Result<f64> {
                rec[k].trim().parse().map_err(|_| {
                    Error::Parse(format!("line {}: invalid number {:?}", i + 2, &rec[k]))
                })
            };
            Ok(ReportRow {
                system: Some(rec[0].to_string()),
                metrics: MetricReport::precomputed(num(1)?, num(2)?, num(3)?, num(4)?, num(5)?),
            })
        })
        .collect()
}

/// One line per epoch, then a summary line naming the selected epoch.
pub fn format_history(outcome: &TrainOutcome) -> String {
    let mut out = String::new();
    for rec in &outcome.history {
        writeln!(
            out,
            "epoch {} train_loss {:.6} dev_macro_f1 {:.4} lr {:e}",
            rec.epoch, rec.train_loss, rec.dev_macro_f1, rec.learning_rate
        )
        .unwrap();
    }
    let best = &outcome.history[outcome.best_epoch - 1];
    writeln!(
        out,
        "best epoch {} dev_macro_f1 {:.4}",
        outcome.best_epoch, best.dev_macro_f1
    )
    .unwrap();
    out
}
