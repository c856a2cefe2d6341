//! Long-format panel files and report output.
//!
//! Input files carry one cell per row with a header naming `unit`, `time`,
//! `value` and optionally `treated`. Units keep their order of first
//! appearance; times are sorted numerically when every id parses as a
//! number and in natural order otherwise.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::panel::ObservedPanel;
use crate::treatment::TreatmentPanel;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PanelLabels {
    pub units: Vec<String>,
    pub times: Vec<String>,
}

impl PanelLabels {
    /// `1..=n` and `1..=t`.
    pub fn numbered(n: usize, t: usize) -> Self {
        PanelLabels {
            units: (1..=n).map(|i| i.to_string()).collect(),
            times: (1..=t).map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum LoadedPanel {
    Observed(ObservedPanel),
    Treatment(TreatmentPanel),
}

#[derive(Debug, Clone)]
pub struct PanelFile {
    pub panel: LoadedPanel,
    pub labels: PanelLabels,
    /// SHA-256 of the raw file bytes, hex encoded.
    pub digest: String,
}

impl PanelFile {
    pub fn observed(&self) -> Option<&ObservedPanel> {
        match &self.panel {
            LoadedPanel::Observed(p) => Some(p),
            LoadedPanel::Treatment(_) => None,
        }
    }

    pub fn treatment(&self) -> Option<&TreatmentPanel> {
        match &self.panel {
            LoadedPanel::Treatment(p) => Some(p),
            LoadedPanel::Observed(_) => None,
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Orders time ids: numerically if all parse as numbers, else naturally.
pub fn sort_time_ids(ids: &mut [String]) {
    let numeric: Option<Vec<f64>> = ids.iter().map(|s| s.trim().parse::<f64>().ok()).collect();
    match numeric {
        Some(_) => ids.sort_by(|a, b| {
            let (x, y) = (
                a.trim().parse::<f64>().unwrap(),
                b.trim().parse::<f64>().unwrap(),
            );
            x.total_cmp(&y).then_with(|| a.cmp(b))
        }),
        None => ids.sort_by(|a, b| match natord::compare(a, b) {
            Ordering::Equal => a.cmp(b),
            o => o,
        }),
    }
}

fn column(headers: &csv::StringRecord, name: &str) -> Option<usize> {
    headers
        .iter()
        .position(|h| h.trim().eq_ignore_ascii_case(name))
}

fn parse_error(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

pub fn load_panel(path: &Path, delimiter: u8) -> Result<PanelFile> {
    let bytes = fs::read(path)?;
    parse_panel(&bytes, delimiter)
}

pub fn parse_panel(bytes: &[u8], delimiter: u8) -> Result<PanelFile> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .flexible(false)
        .from_reader(bytes);
    let headers = reader
        .headers()
        .map_err(|e| parse_error(1, e.to_string()))?
        .clone();
    let unit_col =
        column(&headers, "unit").ok_or_else(|| parse_error(1, "missing `unit` column"))?;
    let time_col =
        column(&headers, "time").ok_or_else(|| parse_error(1, "missing `time` column"))?;
    let value_col =
        column(&headers, "value").ok_or_else(|| parse_error(1, "missing `value` column"))?;
    let treated_col = column(&headers, "treated");

    struct Row {
        unit: usize,
        time: String,
        value: Option<f64>,
        treated: Option<bool>,
    }
    let mut unit_index: HashMap<String, usize> = HashMap::new();
    let mut units = Vec::new();
    let mut rows = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let line = r + 2;
        let record = record.map_err(|e| parse_error(line, e.to_string()))?;
        let unit = record[unit_col].trim().to_string();
        let time = record[time_col].trim().to_string();
        if unit.is_empty() || time.is_empty() {
            return Err(parse_error(line, "empty unit or time id"));
        }
        let raw_value = record[value_col].trim();
        let value = if raw_value.is_empty() || raw_value.eq_ignore_ascii_case("na") {
            None
        } else {
            let v: f64 = raw_value
                .parse()
                .map_err(|_| parse_error(line, format!("value `{raw_value}` is not a number")))?;
            if !v.is_finite() {
                return Err(parse_error(
                    line,
                    format!("value `{raw_value}` is not finite"),
                ));
            }
            Some(v)
        };
        let treated = match treated_col {
            None => None,
            Some(c) => match record[c].trim() {
                "" => None,
                "0" => Some(false),
                "1" => Some(true),
                other => {
                    return Err(parse_error(
                        line,
                        format!("treated flag `{other}` is not 0 or 1"),
                    ))
                }
            },
        };
        if treated_col.is_some() && (value.is_none() || treated.is_none()) {
            return Err(Error::MixedTreatmentSchema { line });
        }
        let next = units.len();
        let u = *unit_index.entry(unit.clone()).or_insert(next);
        if u == next {
            units.push(unit);
        }
        rows.push(Row {
            unit: u,
            time,
            value,
            treated,
        });
    }
    if rows.is_empty() {
        return Err(parse_error(1, "no data rows"));
    }

    let mut times: Vec<String> = rows.iter().map(|r| r.time.clone()).collect();
    sort_time_ids(&mut times);
    times.dedup();
    let time_index: HashMap<&str, usize> = times
        .iter()
        .enumerate()
        .map(|(s, t)| (t.as_str(), s))
        .collect();

    let (n, t) = (units.len(), times.len());
    let mut seen = DMatrix::from_element(n, t, false);
    let mut values = DMatrix::zeros(n, t);
    let mut mask = DMatrix::from_element(n, t, false);
    let mut treat = DMatrix::from_element(n, t, false);
    for row in &rows {
        let s = time_index[row.time.as_str()];
        if seen[(row.unit, s)] {
            return Err(Error::DuplicateCell {
                unit: units[row.unit].clone(),
                time: row.time.clone(),
            });
        }
        seen[(row.unit, s)] = true;
        if let Some(v) = row.value {
            values[(row.unit, s)] = v;
            mask[(row.unit, s)] = true;
        }
        treat[(row.unit, s)] = row.treated.unwrap_or(false);
    }

    let panel = if treated_col.is_some() {
        if let Some(pos) = seen.iter().position(|&x| !x) {
            let (i, s) = (pos % n, pos / n);
            return Err(Error::MissingCell {
                unit: units[i].clone(),
                time: times[s].clone(),
            });
        }
        LoadedPanel::Treatment(TreatmentPanel::new(values, treat)?)
    } else {
        LoadedPanel::Observed(ObservedPanel::new(values, mask)?)
    };
    Ok(PanelFile {
        panel,
        labels: PanelLabels { units, times },
        digest: sha256_hex(bytes),
    })
}

/// Writes `contents` to `path` through a temporary file in the same
/// directory, so readers never see a partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn csv_writer(delimiter: u8) -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new()
        .delimiter(delimiter)
        .from_writer(Vec::new())
}

fn finish(writer: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    writer.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Observed cells only, in unit-major order.
pub fn panel_to_csv(panel: &ObservedPanel, labels: &PanelLabels, delimiter: u8) -> Result<Vec<u8>> {
    let mut w = csv_writer(delimiter);
    w.write_record(["unit", "time", "value"]).map_err(csv_io)?;
    for i in 0..panel.n_units() {
        for s in 0..panel.n_periods() {
            if let Some(y) = panel.get(i, s) {
                w.write_record([
                    labels.units[i].as_str(),
                    labels.times[s].as_str(),
                    &y.to_string(),
                ])
                .map_err(csv_io)?;
            }
        }
    }
    finish(w)
}

pub fn treatment_to_csv(
    panel: &TreatmentPanel,
    labels: &PanelLabels,
    delimiter: u8,
) -> Result<Vec<u8>> {
    let mut w = csv_writer(delimiter);
    w.write_record(["unit", "time", "value", "treated"])
        .map_err(csv_io)?;
    let (n, t) = panel.shape();
    for i in 0..n {
        for s in 0..t {
            let flag = if panel.treat()[(i, s)] { "1" } else { "0" };
            w.write_record([
                labels.units[i].as_str(),
                labels.times[s].as_str(),
                &panel.outcomes()[(i, s)].to_string(),
                flag,
            ])
            .map_err(csv_io)?;
        }
    }
    finish(w)
}

pub fn save_panel(
    path: &Path,
    panel: &ObservedPanel,
    labels: &PanelLabels,
    delimiter: u8,
) -> Result<()> {
    write_atomic(path, &panel_to_csv(panel, labels, delimiter)?)
}

/// Every cell of the completed matrix; `imputed` marks cells that were not
/// observed.
pub fn completed_to_csv(
    m_hat: &DMatrix<f64>,
    observed: &DMatrix<bool>,
    labels: &PanelLabels,
    delimiter: u8,
) -> Result<Vec<u8>> {
    let mut w = csv_writer(delimiter);
    w.write_record(["unit", "time", "value", "imputed"])
        .map_err(csv_io)?;
    for i in 0..m_hat.nrows() {
        for s in 0..m_hat.ncols() {
            let imputed = if observed[(i, s)] { "0" } else { "1" };
            w.write_record([
                labels.units[i].as_str(),
                labels.times[s].as_str(),
                &m_hat[(i, s)].to_string(),
                imputed,
            ])
            .map_err(csv_io)?;
        }
    }
    finish(w)
}

/// Pretty JSON with a trailing newline. Floats use the shortest text that
/// parses back to the same value.
pub fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value)?;
    out.push(b'\n');
    Ok(out)
}

/// A header and rows of already formatted fields.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Table {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push<S: Into<String>>(&mut self, row: impl IntoIterator<Item = S>) {
        self.rows.push(row.into_iter().map(Into::into).collect());
    }

    pub fn to_csv(&self, delimiter: u8) -> Result<Vec<u8>> {
        let mut w = csv_writer(delimiter);
        w.write_record(&self.header).map_err(csv_io)?;
        for row in &self.rows {
            w.write_record(row).map_err(csv_io)?;
        }
        finish(w)
    }
}
