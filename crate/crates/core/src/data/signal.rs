use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LabeledDataset, Provenance};
use crate::error::{Error, Result};
use crate::ndnum::Tensor;

pub const DEFAULT_WINDOW: usize = 32;
pub const DEFAULT_STRIDE: usize = 16;

/// One multichannel recording of a single gesture trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalRecording {
    pub channels: usize,
    pub length: usize,
    /// `[channels, length]`
    pub values: Tensor,
    pub label: usize,
    pub trial: u64,
    pub subject: u64,
}

impl SignalRecording {
    pub fn new(values: Tensor, label: usize, trial: u64, subject: u64) -> Result<Self> {
        if values.shape().len() != 2 {
            return Err(Error::Data(format!("recording needs a [C, L] matrix, got {:?}", values.shape())));
        }
        Ok(SignalRecording {
            channels: values.rows(),
            length: values.cols(),
            values,
            label,
            trial,
            subject,
        })
    }
}

/// Cuts `[C, win]` windows at offsets `0, stride, 2 stride, ...` while the
/// window fits.
pub fn sliding_window(rec: &SignalRecording, win: usize, stride: usize) -> Result<Vec<Tensor>> {
    if win == 0 || stride == 0 {
        return Err(Error::Data(format!("window {win} and stride {stride} must be positive")));
    }
    if win > rec.length {
        return Err(Error::Data(format!("window {win} longer than recording length {}", rec.length)));
    }
    let count = (rec.length - win) / stride + 1;
    Ok((0..count)
        .map(|w| {
            let off = w * stride;
            let mut data = Vec::with_capacity(rec.channels * win);
            for c in 0..rec.channels {
                data.extend_from_slice(&rec.values.row(c)[off..off + win]);
            }
            Tensor::matrix(rec.channels, win, data).expect("window shape")
        })
        .collect())
}

/// Flattens every window of every recording into one dataset row. Each
/// `(subject, trial)` pair becomes a split group.
pub fn recordings_to_dataset(recs: &[SignalRecording], win: usize, stride: usize, path: &str) -> Result<LabeledDataset> {
    let channels = recs.first().map(|r| r.channels).unwrap_or(0);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut groups = Vec::new();
    let mut keys: Vec<(u64, u64)> = Vec::new();
    for r in recs {
        if r.channels != channels {
            return Err(Error::Data(format!(
                "recording (subject {}, trial {}) has {} channels, expected {channels}",
                r.subject, r.trial, r.channels
            )));
        }
        let key = (r.subject, r.trial);
        let g = keys.iter().position(|k| *k == key).unwrap_or_else(|| {
            keys.push(key);
            keys.len() - 1
        });
        for w in sliding_window(r, win, stride)? {
            data.extend_from_slice(w.data());
            labels.push(r.label);
            groups.push(g as u64);
        }
    }
    let mut ds = LabeledDataset::new(
        Tensor::matrix(labels.len(), channels * win, data)?,
        labels,
        Provenance::SignalCsv {
            path: path.to_string(),
            window: win,
            stride,
        },
    )?;
    ds.groups = Some(groups);
    Ok(ds)
}

/// The two accepted CSV layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schema {
    /// `subject,trial,label,t,ch1..chC`, one row per time step.
    Signal,
    /// `label,f1..fd`, one row per sample.
    Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Ingested {
    Signals(Vec<SignalRecording>),
    Vectors(LabeledDataset),
}

fn detect(header: &csv::StringRecord) -> Option<Schema> {
    let cols: Vec<&str> = header.iter().map(str::trim).collect();
    let numbered = |rest: &[&str], prefix: &str| {
        !rest.is_empty() && rest.iter().enumerate().all(|(i, c)| *c == format!("{prefix}{}", i + 1))
    };
    if cols.len() > 4 && cols[..4] == ["subject", "trial", "label", "t"] && numbered(&cols[4..], "ch") {
        Some(Schema::Signal)
    } else if cols.len() > 1 && cols[0] == "label" && numbered(&cols[1..], "f") {
        Some(Schema::Vector)
    } else {
        None
    }
}

struct Cells<'a> {
    path: &'a Path,
    line: u64,
    rec: &'a csv::StringRecord,
}

impl Cells<'_> {
    fn err(&self, message: String) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            line: self.line,
            message,
        }
    }

    fn int(&self, col: usize, name: &str) -> Result<u64> {
        let s = self.rec[col].trim();
        s.parse().map_err(|_| self.err(format!("column {name}: expected a non-negative integer, got {s:?}")))
    }

    fn real(&self, col: usize, name: &str) -> Result<f64> {
        let s = self.rec[col].trim();
        let v: f64 = s
            .parse()
            .map_err(|_| self.err(format!("column {name}: expected a number, got {s:?}")))?;
        if !v.is_finite() {
            return Err(self.err(format!("column {name}: non-finite value {s:?}")));
        }
        Ok(v)
    }
}

/// Reads either CSV layout; the header decides when `schema` is `None`.
pub fn ingest_csv(path: &Path, schema: Option<Schema>) -> Result<Ingested> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let header = reader.headers()?.clone();
    let found = detect(&header);
    let schema = match (schema, found) {
        (Some(want), Some(got)) if want == got => want,
        (None, Some(got)) => got,
        _ => {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: format!(
                    "header {:?} matches neither `subject,trial,label,t,ch1..chC` nor `label,f1..fd`{}",
                    header.iter().collect::<Vec<_>>(),
                    schema.map(|s| format!(" (requested {s:?})")).unwrap_or_default()
                ),
            })
        }
    };
    let width = header.len();
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != width {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("expected {width} columns, found {}", rec.len()),
            });
        }
        rows.push((line, rec));
    }
    let path_str = path.display().to_string();
    match schema {
        Schema::Vector => {
            let d = width - 1;
            let mut data = Vec::with_capacity(rows.len() * d);
            let mut labels = Vec::with_capacity(rows.len());
            for (line, rec) in &rows {
                let cells = Cells { path, line: *line, rec };
                labels.push(cells.int(0, "label")? as usize);
                for j in 1..width {
                    data.push(cells.real(j, &header[j])?);
                }
            }
            Ok(Ingested::Vectors(LabeledDataset::new(
                Tensor::matrix(labels.len(), d, data)?,
                labels,
                Provenance::VectorCsv { path: path_str },
            )?))
        }
        Schema::Signal => {
            let channels = width - 4;
            // (subject, trial, label) -> (t, values) in first-seen order
            type Key = (u64, u64, u64);
            type Samples = Vec<(f64, Vec<f64>)>;
            let mut groups: Vec<(Key, Samples)> = Vec::new();
            for (line, rec) in &rows {
                let cells = Cells { path, line: *line, rec };
                let key = (cells.int(0, "subject")?, cells.int(1, "trial")?, cells.int(2, "label")?);
                let t = cells.real(3, "t")?;
                let vals = (4..width).map(|j| cells.real(j, &header[j])).collect::<Result<Vec<_>>>()?;
                match groups.iter_mut().find(|(k, _)| *k == key) {
                    Some((_, g)) => g.push((t, vals)),
                    None => groups.push((key, vec![(t, vals)])),
                }
            }
            let mut out = Vec::with_capacity(groups.len());
            for ((subject, trial, label), mut samples) in groups {
                samples.sort_by(|a, b| a.0.total_cmp(&b.0));
                let len = samples.len();
                let mut values = vec![0.0; channels * len];
                for (t, (_, v)) in samples.iter().enumerate() {
                    for c in 0..channels {
                        values[c * len + t] = v[c];
                    }
                }
                out.push(SignalRecording::new(
                    Tensor::matrix(channels, len, values)?,
                    label as usize,
                    trial,
                    subject,
                )?);
            }
            Ok(Ingested::Signals(out))
        }
    }
}
