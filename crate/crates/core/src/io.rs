//! File formats: logit tables, dataset CSV, report and per-point CSVs.
//!
//! Report-style CSVs print every real at 6 significant digits in the
//! shortest form that parses back to the same rounded value, independent of
//! locale. Dataset and logit exports keep full round-trip precision.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::metrics::{EvalReport, PointRecord};
use crate::model::Dataset;
use crate::numkit::{self, ProbVector};

/// Tolerance on the row sum of probability-mode logit tables.
pub const PROB_ROW_TOL: f64 = 1e-4;

/// Round to 6 significant digits.
pub fn round_sig6(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.5e}").parse().expect("formatted float parses")
}

/// 6 significant digits, shortest representation, `inf`/`-inf`/`nan` literals.
pub fn fmt_sig6(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let r = round_sig6(x);
    if r == 0.0 {
        "0".into()
    } else {
        r.to_string()
    }
}

fn parse_f64(field: &str, line: usize) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| Error::parse(line, format!("'{field}' is not a number")))
}

fn parse_usize(field: &str, line: usize) -> Result<usize> {
    field
        .trim()
        .parse::<usize>()
        .map_err(|_| Error::parse(line, format!("'{field}' is not a non-negative integer")))
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    Error::parse(line, e.to_string())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn finish(writer: csv::Writer<Vec<u8>>) -> Vec<u8> {
    writer.into_inner().expect("in-memory csv writer")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Orientation {
    RawLogits,
    #[default]
    Probabilities,
}

impl fmt::Display for Orientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Orientation::RawLogits => "raw_logits",
            Orientation::Probabilities => "probabilities",
        })
    }
}

impl FromStr for Orientation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw_logits" | "logits" => Ok(Self::RawLogits),
            "probabilities" | "probs" => Ok(Self::Probabilities),
            other => Err(Error::Config(format!("unknown orientation '{other}'"))),
        }
    }
}

/// Per-sample class scores with labels, already mapped to probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitTable {
    pub labels: Vec<usize>,
    pub probs: Vec<ProbVector>,
    pub orientation: Orientation,
}

impl LogitTable {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.probs.first().map_or(0, |p| p.num_classes())
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            probs: idx.iter().map(|&i| self.probs[i].clone()).collect(),
            orientation: self.orientation,
        }
    }

    pub fn true_label_scores(&self) -> Vec<f64> {
        self.probs
            .iter()
            .zip(&self.labels)
            .map(|(p, &y)| p.as_slice()[y])
            .collect()
    }
}

/// Parse a logit table with header `label,s0,...,s{k-1}`.
///
/// Raw-logit rows pass through `softmax(., T=1)`. Probability rows must have
/// entries in `[0, 1]` summing to `1 +- 1e-4`; off-by-more-than-rounding rows
/// are renormalised.
pub fn parse_logit_table(reader: impl Read, orientation: Orientation) -> Result<LogitTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let mut records = rdr.records();
    let header = records
        .next()
        .ok_or_else(|| Error::parse(1, "empty logit table"))?
        .map_err(csv_error)?;
    if header.len() < 3 || header.get(0) != Some("label") {
        return Err(Error::parse(1, "header must be 'label,s0,...,s{k-1}' with k >= 2"));
    }
    let k = header.len() - 1;
    for (j, name) in header.iter().skip(1).enumerate() {
        if name != format!("s{j}") {
            return Err(Error::parse(1, format!("header column {} must be 's{j}', got '{name}'", j + 1)));
        }
    }
    let mut labels = Vec::new();
    let mut probs = Vec::new();
    for rec in records {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != k + 1 {
            return Err(Error::parse(line, format!("expected {} fields, found {}", k + 1, rec.len())));
        }
        let label = parse_usize(&rec[0], line)?;
        if label >= k {
            return Err(Error::parse(line, format!("label {label} out of range for k={k}")));
        }
        let values: Vec<f64> = (1..=k).map(|j| parse_f64(&rec[j], line)).collect::<Result<_>>()?;
        let p = match orientation {
            Orientation::RawLogits => {
                numkit::softmax(&values, 1.0).map_err(|e| Error::parse(line, e.to_string()))?
            }
            Orientation::Probabilities => {
                if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::parse(line, "probability entries must lie in [0, 1]"));
                }
                let sum: f64 = values.iter().sum();
                if (sum - 1.0).abs() > PROB_ROW_TOL {
                    return Err(Error::parse(line, format!("probabilities sum to {sum}, expected 1")));
                }
                let values = if (sum - 1.0).abs() > 1e-12 {
                    values.iter().map(|v| v / sum).collect()
                } else {
                    values
                };
                ProbVector::new(values).map_err(|e| Error::parse(line, e.to_string()))?
            }
        };
        labels.push(label);
        probs.push(p);
    }
    if labels.is_empty() {
        return Err(Error::parse(2, "logit table has no data rows"));
    }
    Ok(LogitTable {
        labels,
        probs,
        orientation,
    })
}

pub fn load_logit_table(path: &Path, orientation: Orientation) -> Result<LogitTable> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_logit_table(std::io::BufReader::new(file), orientation)
}

/// Write rows of scores (`probabilities` or raw logits) in logit-table form.
pub fn logit_table_csv(labels: &[usize], rows: &[Vec<f64>]) -> Result<Vec<u8>> {
    let k = rows.first().map_or(0, |r| r.len());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["label".to_string()];
    header.extend((0..k).map(|j| format!("s{j}")));
    w.write_record(&header).map_err(csv_error)?;
    for (y, row) in labels.iter().zip(rows) {
        let mut rec = vec![y.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_error)?;
    }
    Ok(finish(w))
}

/// Dataset export: header `label,x0,...,x{d-1}`, one row per sample.
pub fn dataset_csv(data: &Dataset) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["label".to_string()];
    header.extend((0..data.dim()).map(|j| format!("x{j}")));
    w.write_record(&header).map_err(csv_error)?;
    for (x, y) in data.rows().zip(data.labels()) {
        let mut rec = vec![y.to_string()];
        rec.extend(x.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_error)?;
    }
    Ok(finish(w))
}

pub fn parse_dataset(reader: impl Read, num_classes: usize) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers().map_err(csv_error)?.clone();
    if header.len() < 2 || header.get(0) != Some("label") {
        return Err(Error::parse(1, "dataset header must be 'label,x0,...'"));
    }
    let d = header.len() - 1;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let y = parse_usize(&rec[0], line)?;
        if y >= num_classes {
            return Err(Error::parse(line, format!("label {y} out of range")));
        }
        labels.push(y);
        for j in 1..=d {
            features.push(parse_f64(&rec[j], line)?);
        }
    }
    Dataset::new(features, d, labels, num_classes)
}

pub fn write_dataset(data: &Dataset, path: &Path) -> Result<()> {
    write_file(path, &dataset_csv(data)?)
}

pub const REPORT_HEADER: [&str; 12] = [
    "method",
    "dataset",
    "seed",
    "alpha",
    "n",
    "coverage",
    "avg_size",
    "empty_set_rate",
    "lce_w",
    "lce_signed_w",
    "lss_w",
    "window",
];

/// Headline metrics of one (method, dataset, seed) run.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub dataset: String,
    pub seed: u64,
    pub alpha: f64,
    pub n: usize,
    pub coverage: f64,
    pub avg_size: f64,
    pub empty_set_rate: f64,
    pub lce_w: f64,
    pub lce_signed_w: f64,
    pub lss_w: f64,
    pub window: usize,
}

impl From<&EvalReport> for ReportRow {
    fn from(r: &EvalReport) -> Self {
        Self {
            method: r.method.clone(),
            dataset: r.dataset.clone(),
            seed: r.seed,
            alpha: r.alpha,
            n: r.n,
            coverage: r.coverage,
            avg_size: r.avg_size,
            empty_set_rate: r.empty_set_rate,
            lce_w: r.lce_w,
            lce_signed_w: r.lce_signed_w,
            lss_w: r.lss_w,
            window: r.window,
        }
    }
}

impl ReportRow {
    /// The row as it reads back after a trip through the CSV.
    pub fn rounded(&self) -> Self {
        Self {
            alpha: round_sig6(self.alpha),
            coverage: round_sig6(self.coverage),
            avg_size: round_sig6(self.avg_size),
            empty_set_rate: round_sig6(self.empty_set_rate),
            lce_w: round_sig6(self.lce_w),
            lce_signed_w: round_sig6(self.lce_signed_w),
            lss_w: round_sig6(self.lss_w),
            ..self.clone()
        }
    }
}

pub fn report_csv(rows: &[ReportRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(REPORT_HEADER).map_err(csv_error)?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.dataset.clone(),
            r.seed.to_string(),
            fmt_sig6(r.alpha),
            r.n.to_string(),
            fmt_sig6(r.coverage),
            fmt_sig6(r.avg_size),
            fmt_sig6(r.empty_set_rate),
            fmt_sig6(r.lce_w),
            fmt_sig6(r.lce_signed_w),
            fmt_sig6(r.lss_w),
            r.window.to_string(),
        ])
        .map_err(csv_error)?;
    }
    Ok(finish(w))
}

pub fn parse_report_csv(reader: impl Read) -> Result<Vec<ReportRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header = rdr.headers().map_err(csv_error)?.clone();
    if header.iter().ne(REPORT_HEADER.iter().copied()) {
        return Err(Error::parse(1, "unexpected report header"));
    }
    rdr.records()
        .map(|rec| {
            let rec = rec.map_err(csv_error)?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            Ok(ReportRow {
                method: rec[0].to_string(),
                dataset: rec[1].to_string(),
                seed: rec[2].parse().map_err(|_| Error::parse(line, "bad seed"))?,
                alpha: parse_f64(&rec[3], line)?,
                n: parse_usize(&rec[4], line)?,
                coverage: parse_f64(&rec[5], line)?,
                avg_size: parse_f64(&rec[6], line)?,
                empty_set_rate: parse_f64(&rec[7], line)?,
                lce_w: parse_f64(&rec[8], line)?,
                lce_signed_w: parse_f64(&rec[9], line)?,
                lss_w: parse_f64(&rec[10], line)?,
                window: parse_usize(&rec[11], line)?,
            })
        })
        .collect()
}

pub const POINTS_HEADER: [&str; 9] = [
    "method", "dataset", "seed", "index", "label", "covered", "set_size", "severity", "u_test",
];

/// A per-point record tagged with its run.
#[derive(Debug, Clone, PartialEq)]
pub struct PointRow {
    pub method: String,
    pub dataset: String,
    pub seed: u64,
    pub record: PointRecord,
}

pub fn points_csv<'a>(reports: impl IntoIterator<Item = &'a EvalReport>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(POINTS_HEADER).map_err(csv_error)?;
    for r in reports {
        for p in &r.records {
            w.write_record([
                r.method.clone(),
                r.dataset.clone(),
                r.seed.to_string(),
                p.index.to_string(),
                p.label.to_string(),
                u8::from(p.covered).to_string(),
                p.set_size.to_string(),
                p.severity.map_or(String::new(), |s| s.to_string()),
                p.u_test.map_or(String::new(), fmt_sig6),
            ])
            .map_err(csv_error)?;
        }
    }
    Ok(finish(w))
}

pub fn parse_points_csv(reader: impl Read) -> Result<Vec<PointRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header = rdr.headers().map_err(csv_error)?.clone();
    if header.iter().ne(POINTS_HEADER.iter().copied()) {
        return Err(Error::parse(1, "unexpected per-point header"));
    }
    rdr.records()
        .map(|rec| {
            let rec = rec.map_err(csv_error)?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            let covered = match &rec[5] {
                "1" => true,
                "0" => false,
                other => return Err(Error::parse(line, format!("bad covered flag '{other}'"))),
            };
            let severity = if rec[7].is_empty() {
                None
            } else {
                Some(rec[7].parse().map_err(|_| Error::parse(line, "bad severity"))?)
            };
            let u_test = if rec[8].is_empty() { None } else { Some(parse_f64(&rec[8], line)?) };
            Ok(PointRow {
                method: rec[0].to_string(),
                dataset: rec[1].to_string(),
                seed: rec[2].parse().map_err(|_| Error::parse(line, "bad seed"))?,
                record: PointRecord {
                    index: parse_usize(&rec[3], line)?,
                    label: parse_usize(&rec[4], line)?,
                    covered,
                    set_size: parse_usize(&rec[6], line)?,
                    severity,
                    u_test,
                },
            })
        })
        .collect()
}

/// A cell in a plot-data table.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Text(String),
    Int(i64),
    Real(f64),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Text(s) => s.clone(),
            Cell::Int(i) => i.to_string(),
            Cell::Real(x) => fmt_sig6(*x),
        }
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.to_string())
    }
}

impl From<String> for Cell {
    fn from(s: String) -> Self {
        Cell::Text(s)
    }
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Real(x)
    }
}

impl From<usize> for Cell {
    fn from(x: usize) -> Self {
        Cell::Int(x as i64)
    }
}

impl From<u64> for Cell {
    fn from(x: u64) -> Self {
        Cell::Int(x as i64)
    }
}

impl From<u8> for Cell {
    fn from(x: u8) -> Self {
        Cell::Int(i64::from(x))
    }
}

impl From<bool> for Cell {
    fn from(x: bool) -> Self {
        Cell::Int(i64::from(x))
    }
}

/// A small named table for plot-data CSVs.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).map_err(csv_error)?;
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::render)).map_err(csv_error)?;
        }
        Ok(finish(w))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_csv()?)
    }
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    write_file(path, bytes)
}

/// Write to stdout, ignoring broken pipes.
pub fn print_bytes(bytes: &[u8]) {
    let _ = std::io::stdout().write_all(bytes);
}
