//! CSV loading, per-entity z-scoring, contiguous splits and sliding windows.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Variance floor for constant entities.
pub const STD_FLOOR: f64 = 1e-8;

/// A multivariate series: `values[k]` is the full observation row of entity `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSeries {
    pub entity_names: Vec<String>,
    pub values: Vec<Vec<f64>>,
    pub labels: Option<Vec<u8>>,
}

impl RawSeries {
    pub fn new(entity_names: Vec<String>, values: Vec<Vec<f64>>, labels: Option<Vec<u8>>) -> Result<Self> {
        if entity_names.len() != values.len() {
            return Err(Error::Contract(format!(
                "{} names for {} entity rows",
                entity_names.len(),
                values.len()
            )));
        }
        let len = values.first().map_or(0, Vec::len);
        if values.iter().any(|r| r.len() != len) {
            return Err(Error::Contract("entity rows differ in length".into()));
        }
        if let Some(l) = &labels {
            if l.len() != len {
                return Err(Error::Contract(format!("{} labels for {} observations", l.len(), len)));
            }
            if l.iter().any(|&v| v > 1) {
                return Err(Error::Contract("labels must be 0 or 1".into()));
            }
        }
        Ok(RawSeries { entity_names, values, labels })
    }

    pub fn entities(&self) -> usize {
        self.values.len()
    }

    /// Observations per entity.
    pub fn len(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Contiguous time range `start..end` of every entity (and the labels).
    pub fn slice(&self, start: usize, end: usize) -> RawSeries {
        RawSeries {
            entity_names: self.entity_names.clone(),
            values: self.values.iter().map(|r| r[start..end].to_vec()).collect(),
            labels: self.labels.as_ref().map(|l| l[start..end].to_vec()),
        }
    }
}

fn parse_label(cell: &str) -> Option<u8> {
    match cell.trim().parse::<f64>().ok()? {
        0.0 => Some(0),
        1.0 => Some(1),
        _ => None,
    }
}

/// Reads a header-first, one-row-per-time-step CSV. A trailing column named
/// `label` is taken as the point label.
pub fn load_csv(path: &Path) -> Result<RawSeries> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut text = String::new();
    File::open(path)?.read_to_string(&mut text)?;
    parse_csv(&text)
}

pub fn parse_csv(text: &str) -> Result<RawSeries> {
    if text.trim().is_empty() {
        return Err(Error::EmptyInput("csv has no content".into()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Parse { line: 1, column: 0, msg: e.to_string() })?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let has_label = header.last().is_some_and(|h| h == "label");
    let k = header.len() - usize::from(has_label);
    if k == 0 {
        return Err(Error::EmptyInput("csv header names no entities".into()));
    }
    let mut values = vec![Vec::new(); k];
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            column: 0,
            msg: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != header.len() {
            return Err(Error::Parse {
                line,
                column: record.len(),
                msg: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        for (col, cell) in record.iter().enumerate() {
            let cell = cell.trim();
            if cell.is_empty() {
                return Err(Error::Parse { line, column: col + 1, msg: "missing value".into() });
            }
            if col < k {
                let v: f64 = cell.parse().map_err(|_| Error::Parse {
                    line,
                    column: col + 1,
                    msg: format!("non-numeric value `{cell}` in column `{}`", header[col]),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse { line, column: col + 1, msg: "non-finite value".into() });
                }
                values[col].push(v);
            } else {
                labels.push(parse_label(cell).ok_or_else(|| Error::Parse {
                    line,
                    column: col + 1,
                    msg: format!("label must be 0 or 1, found `{cell}`"),
                })?);
            }
        }
    }
    if values[0].is_empty() {
        return Err(Error::EmptyInput("csv has a header but no rows".into()));
    }
    RawSeries::new(header[..k].to_vec(), values, has_label.then_some(labels))
}

/// Writes `series` in the format [`load_csv`] reads.
pub fn write_csv(series: &RawSeries, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(&series.entity_names.join(","));
    if series.labels.is_some() {
        out.push_str(",label");
    }
    out.push('\n');
    for t in 0..series.len() {
        let row: Vec<String> = series.values.iter().map(|r| format!("{}", r[t])).collect();
        out.push_str(&row.join(","));
        if let Some(l) = &series.labels {
            out.push_str(&format!(",{}", l[t]));
        }
        out.push('\n');
    }
    File::create(path)?.write_all(out.as_bytes())?;
    Ok(())
}

/// Per-entity location and scale used by the z-score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Population statistics of every entity row.
    pub fn fit(series: &RawSeries) -> Result<Self> {
        let n = series.len();
        if n < 2 {
            return Err(Error::InsufficientData(format!("z-score needs at least 2 observations, got {n}")));
        }
        let (mut mean, mut std) = (Vec::new(), Vec::new());
        for row in &series.values {
            let m = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
            mean.push(m);
            std.push(var.sqrt());
        }
        Ok(NormStats { mean, std })
    }

    pub fn apply(&self, series: &RawSeries) -> Result<RawSeries> {
        if self.mean.len() != series.entities() {
            return Err(Error::Contract(format!(
                "statistics for {} entities applied to {}",
                self.mean.len(),
                series.entities()
            )));
        }
        let values = series
            .values
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(row, (&m, &s))| {
                let s = s.max(STD_FLOOR);
                row.iter().map(|v| (v - m) / s).collect()
            })
            .collect();
        Ok(RawSeries {
            entity_names: series.entity_names.clone(),
            values,
            labels: series.labels.clone(),
        })
    }
}

/// `(x − mean) / max(std, 1e-8)` per entity with the population std.
pub fn zscore_normalize(series: &RawSeries) -> Result<RawSeries> {
    NormStats::fit(series)?.apply(series)
}

/// Sliding windows `x[cS .. cS+T]` of a normalised series.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowBatch {
    /// One `[K, T]` tensor per window.
    pub windows: Vec<Tensor>,
    /// Start index of each window in the source series.
    pub starts: Vec<usize>,
    pub labels: Vec<u8>,
    pub window: usize,
    pub stride: usize,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn entities(&self) -> usize {
        self.windows.first().map_or(0, |w| w.shape()[0])
    }
}

/// Cuts windows of size `window` every `stride` steps; a trailing remainder
/// shorter than `window` is dropped. A window is anomalous iff any covered
/// point is.
pub fn slide_windows(series: &RawSeries, window: usize, stride: usize) -> Result<WindowBatch> {
    if window == 0 || stride == 0 {
        return Err(Error::Config(format!("window {window} and stride {stride} must be positive")));
    }
    let len = series.len();
    if window > len {
        return Err(Error::InsufficientData(format!(
            "window size {window} exceeds series length {len}"
        )));
    }
    let count = (len - window) / stride + 1;
    let k = series.entities();
    let mut batch = WindowBatch {
        windows: Vec::with_capacity(count),
        starts: Vec::with_capacity(count),
        labels: Vec::with_capacity(count),
        window,
        stride,
    };
    for c in 0..count {
        let start = c * stride;
        let mut data = Vec::with_capacity(k * window);
        for row in &series.values {
            data.extend_from_slice(&row[start..start + window]);
        }
        batch.windows.push(Tensor::new(vec![k, window], data)?);
        batch.starts.push(start);
        let label = series
            .labels
            .as_ref()
            .is_some_and(|l| l[start..start + window].contains(&1));
        batch.labels.push(u8::from(label));
    }
    Ok(batch)
}

/// Contiguous train/validation/test ratios.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitScheme {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitScheme {
    /// 60% train, 20% validation, 20% test.
    pub const TRAIN_VAL_TEST: SplitScheme = SplitScheme { train: 0.6, val: 0.2, test: 0.2 };
    /// 60% train, 40% test.
    pub const TRAIN_TEST: SplitScheme = SplitScheme { train: 0.6, val: 0.0, test: 0.4 };

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios {}/{}/{} must be in [0,1] and sum to 1",
                self.train, self.val, self.test
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: RawSeries,
    pub val: Option<RawSeries>,
    pub test: RawSeries,
}

/// Splits in time order: every split but the last takes `floor(ratio·L)`
/// observations, the last takes the remainder.
pub fn split_dataset(series: &RawSeries, scheme: SplitScheme) -> Result<Splits> {
    scheme.validate()?;
    let len = series.len();
    let take = |r: f64| ((r * len as f64) + 1e-9).floor() as usize;
    let n_train = take(scheme.train).min(len);
    let n_val = if scheme.val > 0.0 { take(scheme.val).min(len - n_train) } else { 0 };
    let train = series.slice(0, n_train);
    let val = (scheme.val > 0.0).then(|| series.slice(n_train, n_train + n_val));
    let test = series.slice(n_train + n_val, len);
    Ok(Splits { train, val, test })
}
