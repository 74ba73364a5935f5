//! CSV and JSON artifacts.
//!
//! Both CSV files share one header. The first nine columns are fixed; the
//! trailing `series,a,b,c` columns label the row and carry solver triples
//! where relevant. Floats use 17 significant digits, absent values are
//! empty and a zero-vector cosine similarity is written as `undefined`.

use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde_json::Value;
use z2_core::analysis::{CosineSimilarity, OrderFit};

pub const COLUMNS: [&str; 13] = [
    "step", "t", "tau_norm", "e_tss", "cos_sim", "h", "error", "slope", "r_squared", "series",
    "a", "b", "c",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Row {
    pub step: Option<usize>,
    pub t: Option<usize>,
    pub tau_norm: Option<f64>,
    pub e_tss: Option<f64>,
    pub cos_sim: Option<CosineSimilarity>,
    pub h: Option<f64>,
    pub error: Option<f64>,
    pub slope: Option<f64>,
    pub r_squared: Option<f64>,
    pub series: String,
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub c: Option<f64>,
}

pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn float(v: Option<f64>) -> String {
    v.map(format_float).unwrap_or_default()
}

fn int(v: Option<usize>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl Row {
    pub fn series(name: impl Into<String>) -> Self {
        Self {
            series: name.into(),
            ..Self::default()
        }
    }

    pub fn record(&self) -> [String; 13] {
        [
            int(self.step),
            int(self.t),
            float(self.tau_norm),
            float(self.e_tss),
            self.cos_sim.map(|c| c.to_string()).unwrap_or_default(),
            float(self.h),
            float(self.error),
            float(self.slope),
            float(self.r_squared),
            self.series.clone(),
            float(self.a),
            float(self.b),
            float(self.c),
        ]
    }
}

/// One row per fitted point, each carrying the series' slope and r².
pub fn fit_rows(series: &str, fit: &OrderFit) -> Vec<Row> {
    fit.step_sizes
        .iter()
        .zip(&fit.errors)
        .map(|(&h, &e)| Row {
            h: Some(h),
            error: Some(e),
            slope: Some(fit.slope),
            r_squared: Some(fit.r_squared),
            ..Row::series(series)
        })
        .collect()
}

pub fn write_rows<W: Write>(out: W, rows: &[Row]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(COLUMNS)?;
    for row in rows {
        w.write_record(row.record())?;
    }
    w.flush()?;
    Ok(())
}

/// `<prefix>.steps.csv`, `<prefix>.fit.csv` and `<prefix>.summary.json`.
pub struct Artifacts {
    pub steps: PathBuf,
    pub fit: PathBuf,
    pub summary: PathBuf,
}

impl Artifacts {
    pub fn new(prefix: &Path) -> Self {
        let with = |ext: &str| {
            let mut s = prefix.as_os_str().to_owned();
            s.push(ext);
            PathBuf::from(s)
        };
        Self {
            steps: with(".steps.csv"),
            fit: with(".fit.csv"),
            summary: with(".summary.json"),
        }
    }

    pub fn write(&self, steps: &[Row], fits: &[Row], summary: &Value) -> io::Result<()> {
        if let Some(dir) = self.steps.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        write_rows(File::create(&self.steps)?, steps)?;
        write_rows(File::create(&self.fit)?, fits)?;
        let mut f = File::create(&self.summary)?;
        serde_json::to_writer_pretty(&mut f, summary)?;
        writeln!(f)?;
        Ok(())
    }
}
