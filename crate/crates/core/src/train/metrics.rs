//! Metrics rows and their CSV files.
//!
//! The main file holds only quantities that are a function of config and
//! seed, so repeated runs produce identical bytes. Wall-clock time goes to a
//! `<name>.timing.csv` sidecar keyed by `(stage, step)`.

use std::path::{Path, PathBuf};

use crate::fsio::write_atomic;

use super::TrainError;

pub const METRICS_HEADER: [&str; 7] = [
    "stage",
    "step",
    "loss",
    "success",
    "batch_size",
    "sim_steps",
    "grad_norm",
];

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub stage: u32,
    pub step: u64,
    /// Mean minibatch loss since the previous row.
    pub loss: f64,
    pub success: f64,
    pub wall_clock: f64,
    pub batch_size: usize,
    pub sim_steps: usize,
    /// Mean global gradient norm since the previous row.
    pub grad_norm: f64,
}

fn csv_bytes(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<Vec<u8>, TrainError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner()
        .map_err(|e| TrainError::Metrics(e.to_string()))
}

pub fn metrics_to_csv(rows: &[MetricsRow]) -> Result<Vec<u8>, TrainError> {
    csv_bytes(
        &METRICS_HEADER,
        rows.iter().map(|r| {
            vec![
                r.stage.to_string(),
                r.step.to_string(),
                format!("{:?}", r.loss),
                format!("{:?}", r.success),
                r.batch_size.to_string(),
                r.sim_steps.to_string(),
                format!("{:?}", r.grad_norm),
            ]
        }),
    )
}

/// Parses a metrics file. `wall_clock` is 0 in the result; errors name the
/// offending line.
pub fn parse_metrics(bytes: &[u8]) -> Result<Vec<MetricsRow>, TrainError> {
    let mut r = csv::Reader::from_reader(bytes);
    let header = r.headers()?.clone();
    if header.iter().ne(METRICS_HEADER) {
        return Err(TrainError::Metrics(format!(
            "line 1: header {:?}, expected {:?}",
            header.iter().collect::<Vec<_>>(),
            METRICS_HEADER
        )));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |field: &str| TrainError::Metrics(format!("line {line}: bad {field} value"));
        fn get<T: std::str::FromStr>(
            rec: &csv::StringRecord,
            i: usize,
        ) -> Option<T> {
            rec.get(i)?.trim().parse().ok()
        }
        let row = MetricsRow {
            stage: get(&rec, 0).ok_or_else(|| bad("stage"))?,
            step: get(&rec, 1).ok_or_else(|| bad("step"))?,
            loss: get(&rec, 2).ok_or_else(|| bad("loss"))?,
            success: get(&rec, 3)
                .filter(|s: &f64| (0.0..=1.0).contains(s))
                .ok_or_else(|| bad("success"))?,
            wall_clock: 0.0,
            batch_size: get(&rec, 4).ok_or_else(|| bad("batch_size"))?,
            sim_steps: get(&rec, 5).ok_or_else(|| bad("sim_steps"))?,
            grad_norm: get(&rec, 6).ok_or_else(|| bad("grad_norm"))?,
        };
        if let Some(prev) = rows.last() {
            let prev: &MetricsRow = prev;
            if (row.stage, row.step) < (prev.stage, prev.step) {
                return Err(TrainError::Metrics(format!(
                    "line {line}: (stage, step) goes backwards"
                )));
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, TrainError> {
    parse_metrics(&std::fs::read(path)?)
}

pub fn timing_path(metrics: &Path) -> PathBuf {
    let stem = metrics
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "metrics".into());
    metrics.with_file_name(format!("{stem}.timing.csv"))
}

/// Metrics file that grows one row per evaluation. Every append rewrites
/// the file through a temporary, so readers never see a partial row.
#[derive(Debug)]
pub struct MetricsLog {
    path: PathBuf,
    rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self, TrainError> {
        let log = Self {
            path: path.to_path_buf(),
            rows: Vec::new(),
        };
        log.flush()?;
        Ok(log)
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn append(&mut self, row: MetricsRow) -> Result<(), TrainError> {
        self.rows.push(row);
        self.flush()
    }

    fn flush(&self) -> Result<(), TrainError> {
        write_atomic(&self.path, &metrics_to_csv(&self.rows)?)?;
        let timing = csv_bytes(
            &["stage", "step", "wall_clock_s"],
            self.rows.iter().map(|r| {
                vec![
                    r.stage.to_string(),
                    r.step.to_string(),
                    format!("{:.3}", r.wall_clock),
                ]
            }),
        )?;
        write_atomic(&timing_path(&self.path), &timing)?;
        Ok(())
    }
}
