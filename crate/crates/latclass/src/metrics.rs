//! Metrics rows and their CSV file.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::Path;

use latclass_core::{Family, Method, PredictionRule, Structure};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub dataset: String,
    /// Series name from the run spec.
    pub model: String,
    pub family: Family,
    /// Empty unless the family is latent.
    pub structure: Option<Structure>,
    pub num_latent: usize,
    /// Empty when the whole training pool was used.
    pub n_per_class: Option<usize>,
    pub seed: u64,
    pub method: Method,
    pub rule: PredictionRule,
    pub epoch_best: Option<usize>,
    pub dev_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub train_nll: Option<f64>,
    pub wall_seconds: f64,
    pub param_count: usize,
    pub leg_hash: String,
    /// Empty on success; the error message of a failed leg otherwise.
    pub note: String,
}

pub fn write_rows<W: Write>(w: W, rows: &[MetricsRow], header: bool) -> csv::Result<()> {
    let mut wr = csv::WriterBuilder::new().has_headers(header).from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_rows<R: Read>(r: R) -> csv::Result<Vec<MetricsRow>> {
    csv::Reader::from_reader(r).deserialize().collect()
}

pub fn load(path: &Path) -> csv::Result<Vec<MetricsRow>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    read_rows(File::open(path)?)
}

/// Appends one row, writing the header first if the file is new or empty.
pub fn append(path: &Path, row: &MetricsRow) -> csv::Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let f = OpenOptions::new().create(true).append(true).open(path)?;
    write_rows(f, std::slice::from_ref(row), fresh)
}

/// Mean, minimum and maximum of a non-empty sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        Some(Summary {
            mean: xs.iter().sum::<f64>() / xs.len() as f64,
            min: xs.iter().copied().fold(f64::INFINITY, f64::min),
            max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            count: xs.len(),
        })
    }
}

/// Dev-accuracy summary per `(model, n_per_class)` over seeds; failed legs skipped.
pub fn dev_summary(rows: &[MetricsRow]) -> BTreeMap<(String, Option<usize>), Summary> {
    let mut groups: BTreeMap<(String, Option<usize>), Vec<f64>> = BTreeMap::new();
    for r in rows {
        if let Some(a) = r.dev_acc {
            groups.entry((r.model.clone(), r.n_per_class)).or_default().push(a);
        }
    }
    groups
        .into_iter()
        .filter_map(|(k, v)| Summary::of(&v).map(|s| (k, s)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn row(seed: u64, dev: Option<f64>) -> MetricsRow {
        MetricsRow {
            dataset: "synthetic".into(),
            model: "lat".into(),
            family: Family::Latent,
            structure: Some(Structure::Auxiliary),
            num_latent: 3,
            n_per_class: Some(5),
            seed,
            method: Method::Direct,
            rule: PredictionRule::MarginalizePrior,
            epoch_best: dev.map(|_| 4),
            dev_acc: dev,
            test_acc: dev.map(|d| d * 0.99),
            train_nll: Some(123.456789012345),
            wall_seconds: 0.1 + 0.2,
            param_count: 4321,
            leg_hash: "ab12".into(),
            note: if dev.is_none() { "failed, \"badly\"".into() } else { String::new() },
        }
    }

    #[test]
    fn round_trip_field_for_field() {
        let rows = vec![row(0, Some(1.0 / 3.0)), row(1, None), row(2, Some(0.7))];
        let mut buf = Vec::new();
        write_rows(&mut buf, &rows, true).unwrap();
        assert_eq!(read_rows(buf.as_slice()).unwrap(), rows);
    }

    #[test]
    fn append_writes_header_once() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        append(&p, &row(0, Some(0.5))).unwrap();
        append(&p, &row(1, Some(0.75))).unwrap();
        let rows = load(&p).unwrap();
        assert_eq!(rows.len(), 2);
        let s = dev_summary(&rows);
        let sum = s[&("lat".to_string(), Some(5))];
        assert_eq!((sum.mean, sum.min, sum.max, sum.count), (0.625, 0.5, 0.75, 2));
    }
}
