//! CSV logs and JSON reports.

use std::path::Path;

use mlkd_core::quantification::EntropyMap;
use mlkd_core::training::{EpochRecord, TrainLog};
use serde::Serialize;

use crate::error::{MlkdError, Result};
use crate::experiments::RunSummary;
use crate::format::write_bytes;

pub const TRAIN_LOG_HEADER: [&str; 11] =
    ["epoch", "lr", "align", "corr", "sup", "ce", "kd", "total", "train_acc", "eval_acc", "seconds"];
pub const ENTROPY_HEADER: [&str; 6] = ["image", "view", "pixel", "sigma", "entropy", "concept"];
pub const RUNS_HEADER: [&str; 6] = ["name", "seed", "fraction", "test_top1", "final_train_acc", "seconds"];

fn csv_err(e: csv::Error) -> MlkdError {
    MlkdError::Runtime(format!("csv: {e}"))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner().map_err(|e| MlkdError::Runtime(format!("csv: {e}")))
}

/// Floats are written with Rust's shortest round-trip formatting, so the
/// CSV parses back to the identical log.
pub fn train_log_csv(log: &TrainLog) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TRAIN_LOG_HEADER).map_err(csv_err)?;
    for r in &log.records {
        w.write_record([
            r.epoch.to_string(),
            r.lr.to_string(),
            r.align.to_string(),
            r.corr.to_string(),
            r.sup.to_string(),
            r.ce.to_string(),
            r.kd.to_string(),
            r.total.to_string(),
            opt(r.train_acc),
            opt(r.eval_acc),
            r.seconds.to_string(),
        ])
        .map_err(csv_err)?;
    }
    finish(w)
}

pub fn parse_train_log(bytes: &[u8]) -> Result<TrainLog> {
    let bad = |m: String| MlkdError::Runtime(format!("train log: {m}"));
    let mut r = csv::Reader::from_reader(bytes);
    let header = r.headers().map_err(csv_err)?;
    if header.iter().ne(TRAIN_LOG_HEADER) {
        return Err(bad(format!("unexpected header {header:?}")));
    }
    let mut records = Vec::new();
    for row in r.records() {
        let row = row.map_err(csv_err)?;
        let f = |i: usize| row[i].parse::<f64>().map_err(|e| bad(format!("column {}: {e}", TRAIN_LOG_HEADER[i])));
        let o = |i: usize| if row[i].is_empty() { Ok(None) } else { f(i).map(Some) };
        records.push(EpochRecord {
            epoch: row[0].parse().map_err(|e| bad(format!("epoch: {e}")))?,
            lr: f(1)?,
            align: f(2)?,
            corr: f(3)?,
            sup: f(4)?,
            ce: f(5)?,
            kd: f(6)?,
            total: f(7)?,
            train_acc: o(8)?,
            eval_acc: o(9)?,
            seconds: f(10)?,
        });
    }
    Ok(TrainLog { records })
}

/// One row per element of every map; `maps[i]` holds the views of image
/// `images[i]`.
pub fn entropy_csv(images: &[usize], maps: &[[EntropyMap; 2]]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(ENTROPY_HEADER).map_err(csv_err)?;
    for (&img, pair) in images.iter().zip(maps) {
        for (view, m) in pair.iter().enumerate() {
            for p in 0..m.sigma.len() {
                w.write_record([
                    img.to_string(),
                    view.to_string(),
                    p.to_string(),
                    m.sigma[p].to_string(),
                    m.entropy[p].to_string(),
                    u8::from(m.concept_mask[p]).to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
    }
    finish(w)
}

pub fn runs_csv(runs: &[RunSummary]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(RUNS_HEADER).map_err(csv_err)?;
    for r in runs {
        w.write_record([
            r.name.clone(),
            r.seed.to_string(),
            r.fraction.to_string(),
            r.test_top1.to_string(),
            opt(r.final_train_acc),
            r.seconds.to_string(),
        ])
        .map_err(csv_err)?;
    }
    finish(w)
}

pub fn json_bytes(value: &impl Serialize) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value).map_err(|e| MlkdError::Runtime(format!("json: {e}")))?;
    v.push(b'\n');
    Ok(v)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_bytes(path, &json_bytes(value)?)
}
