//! CSV outputs with fixed headers, and the prediction-file reader.

use std::path::Path;

use orthosphere_core::analysis::{CalibrationReport, CorrelationStats, PruneRow};
use orthosphere_core::train::EpochRecord;
use orthosphere_core::Tensor;

use crate::error::{Error, Result};

pub const TRAIN_LOG_HEADER: [&str; 8] = ["epoch", "ce", "consistency", "aux", "os", "w_t", "lr_factor", "eval_acc"];
pub const CORRELATION_HEADER: [&str; 3] = ["bin_lo", "bin_hi", "count"];
pub const CALIBRATION_HEADER: [&str; 6] = ["bin", "lo", "hi", "count", "acc", "conf"];
pub const PRUNE_HEADER: [&str; 3] = ["rate_pct", "n", "accuracy"];

fn finish(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner().map_err(|e| Error::Format(format!("csv: {}", e.error())))
}

fn log_row(r: &EpochRecord) -> [String; 8] {
    [
        r.epoch.to_string(),
        r.ce.to_string(),
        r.consistency.to_string(),
        r.aux.to_string(),
        r.os.to_string(),
        r.w_t.to_string(),
        r.lr_factor.to_string(),
        r.eval_acc.map(|a| a.to_string()).unwrap_or_default(),
    ]
}

/// One row per epoch; `eval_acc` is empty for epochs without evaluation.
pub fn training_log_csv(records: &[EpochRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TRAIN_LOG_HEADER)?;
    for r in records {
        w.write_record(log_row(r))?;
    }
    finish(w)
}

/// Rows only, for appending to an existing log.
pub fn training_log_rows(records: &[EpochRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.write_record(log_row(r))?;
    }
    finish(w)
}

pub fn correlation_csv(stats: &CorrelationStats) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CORRELATION_HEADER)?;
    for (i, c) in stats.counts.iter().enumerate() {
        w.write_record([stats.edges[i].to_string(), stats.edges[i + 1].to_string(), c.to_string()])?;
    }
    finish(w)
}

/// Per-bin rows, then a final `scalars` row whose cells are `key=value`
/// pairs: `ece`, `oe`, `bs`, `n` and `bins`.
pub fn calibration_csv(report: &CalibrationReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CALIBRATION_HEADER)?;
    for (i, b) in report.bins.iter().enumerate() {
        w.write_record([
            i.to_string(),
            b.lo.to_string(),
            b.hi.to_string(),
            b.count.to_string(),
            b.acc.to_string(),
            b.conf.to_string(),
        ])?;
    }
    w.write_record([
        "scalars".to_string(),
        format!("ece={}", report.ece),
        format!("oe={}", report.oe),
        format!("bs={}", report.brier),
        format!("n={}", report.samples),
        format!("bins={}", report.bins.len()),
    ])?;
    finish(w)
}

pub fn prune_csv(rows: &[PruneRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(PRUNE_HEADER)?;
    for r in rows {
        w.write_record([r.rate_pct.to_string(), r.n.to_string(), r.accuracy.to_string()])?;
    }
    finish(w)
}

/// Reads a prediction file with header `label,p0,...,p{K-1}`.
pub fn read_predictions(path: &Path) -> Result<(Tensor<f64>, Vec<usize>)> {
    let mut r = csv::Reader::from_path(path)?;
    let k = r.headers()?.len().saturating_sub(1);
    let header_ok = r.headers()?.get(0) == Some("label")
        && r.headers()?.iter().skip(1).enumerate().all(|(j, h)| h == format!("p{j}"));
    if k == 0 || !header_ok {
        return Err(Error::Format(format!("{}: header must be label,p0,...,p<K-1>", path.display())));
    }
    let mut labels = Vec::new();
    let mut probs = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| Error::Format(format!("{}: row {}: {what}", path.display(), row + 1));
        labels.push(rec[0].trim().parse::<usize>().map_err(|_| bad("label is not an integer"))?);
        for cell in rec.iter().skip(1) {
            probs.push(cell.trim().parse::<f64>().map_err(|_| bad("probability is not a number"))?);
        }
    }
    Ok((Tensor::new(&[labels.len(), k], probs)?, labels))
}

/// Parses the `scalars` row of a calibration CSV into `(key, value)` pairs.
pub fn calibration_scalars(csv_bytes: &[u8]) -> Result<Vec<(String, f64)>> {
    let mut r = csv::Reader::from_reader(csv_bytes);
    for rec in r.records() {
        let rec = rec?;
        if &rec[0] == "scalars" {
            return rec
                .iter()
                .skip(1)
                .map(|cell| {
                    let (k, v) =
                        cell.split_once('=').ok_or_else(|| Error::Format(format!("bad scalar cell {cell:?}")))?;
                    let v = v.parse::<f64>().map_err(|_| Error::Format(format!("bad scalar value {cell:?}")))?;
                    Ok((k.to_string(), v))
                })
                .collect();
        }
    }
    Err(Error::Format("no scalars row".into()))
}
