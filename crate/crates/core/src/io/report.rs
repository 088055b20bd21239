//! CSV reports with fixed schemas.

use std::io::Write;
use std::path::Path;

use crate::bundle::BundleEntropyRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportKind {
    Entropy,
    Evolution,
    Sweep,
    Heatmap,
    Lesion,
    Toy,
}

impl ReportKind {
    pub fn file_name(self) -> &'static str {
        match self {
            ReportKind::Entropy => "entropy.csv",
            ReportKind::Evolution => "evolution.csv",
            ReportKind::Sweep => "sweep.csv",
            ReportKind::Heatmap => "heatmap.csv",
            ReportKind::Lesion => "lesion.csv",
            ReportKind::Toy => "toy.csv",
        }
    }
}

/// A row type with a stable CSV schema.
pub trait ReportRow: Sized {
    const KIND: ReportKind;

    /// Column names. Schemas with a variable number of columns derive them
    /// from the rows.
    fn header(rows: &[Self]) -> Vec<String>;

    fn cells(&self) -> Vec<String>;
}

/// Renders a float with 9 significant digits, enough to round-trip binary32.
pub fn format_float(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..9).contains(&exp) {
        return format!(
            "{}e{}{:02}",
            trim_zeros(mantissa),
            if exp < 0 { '-' } else { '+' },
            exp.abs()
        );
    }
    let decimals = (8 - exp) as usize;
    trim_zeros(&format!("{v:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn escape(cell: &str) -> String {
    if cell.contains([',', '"', '\n']) {
        format!("\"{}\"", cell.replace('"', "\"\""))
    } else {
        cell.to_string()
    }
}

pub fn render_report<R: ReportRow>(rows: &[R]) -> String {
    let mut out = String::new();
    let line = |out: &mut String, cells: Vec<String>| {
        let cells: Vec<String> = cells.iter().map(|c| escape(c)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    };
    line(&mut out, R::header(rows));
    for row in rows {
        line(&mut out, row.cells());
    }
    out
}

/// Writes `rows` as CSV to `path` atomically.
pub fn write_report<R: ReportRow>(rows: &[R], path: &Path) -> Result<()> {
    write_atomic(path, render_report(rows).as_bytes())
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub(crate) fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

pub(crate) fn header(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

impl ReportRow for BundleEntropyRecord {
    const KIND: ReportKind = ReportKind::Entropy;

    fn header(_: &[Self]) -> Vec<String> {
        header(&[
            "epoch",
            "layer",
            "block",
            "offset",
            "location",
            "entropy",
            "bundle_count",
        ])
    }

    fn cells(&self) -> Vec<String> {
        vec![
            self.epoch.to_string(),
            self.layer.to_string(),
            self.block.clone(),
            self.offset.to_string(),
            self.location.name().to_string(),
            format_float(self.entropy),
            self.bundle_count.to_string(),
        ]
    }
}
