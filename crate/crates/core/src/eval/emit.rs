use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::synth::{ConditionTag, SizeBin};

use super::report::{CellStats, CellTable};

pub const CSV_HEADER: &str = "condition,size_bin,n,correct,accuracy,sem";
pub const PLOT_HEADER: &str = "condition,size_bin,accuracy,sem";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    PlotData,
}

impl ReportFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::PlotData => "plot.csv",
        }
    }
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "plotdata" => Ok(ReportFormat::PlotData),
            _ => Err(Error::Config(format!("unknown report format '{s}'"))),
        }
    }
}

/// One row per cell, conditions in their canonical order and small before
/// large within a condition.
pub fn table_to_csv(table: &CellTable) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for ((c, b), s) in &table.cells {
        out.push_str(&format!(
            "{},{},{},{},{:.4},{:.4}\n",
            c.as_str(),
            b.as_str(),
            s.n,
            s.correct,
            s.accuracy(),
            s.sem()
        ));
    }
    out
}

/// Long format for grouped bars: every condition gets both size bins, with
/// empty cells written as `nan`.
pub fn table_to_plotdata(table: &CellTable) -> String {
    let mut out = format!("{PLOT_HEADER}\n");
    for c in ConditionTag::ALL {
        if !SizeBin::ALL
            .iter()
            .any(|b| table.cells.contains_key(&(c, *b)))
        {
            continue;
        }
        for b in SizeBin::ALL {
            match table.cells.get(&(c, b)) {
                Some(s) => out.push_str(&format!(
                    "{},{},{:.4},{:.4}\n",
                    c,
                    b.as_str(),
                    s.accuracy(),
                    s.sem()
                )),
                None => out.push_str(&format!("{},{},nan,nan\n", c, b.as_str())),
            }
        }
    }
    out
}

fn fields<'a>(line: &'a str, n: usize, source_name: &str, line_no: usize) -> Result<Vec<&'a str>> {
    let f: Vec<&str> = line.split(',').map(str::trim).collect();
    if f.len() != n {
        return Err(Error::Parse {
            source_name: source_name.to_string(),
            line: line_no,
            detail: format!("expected {n} fields, found {}", f.len()),
        });
    }
    Ok(f)
}

fn check_header(text: &str, header: &str, source_name: &str) -> Result<()> {
    match text.lines().next() {
        Some(h) if h.trim_end() == header => Ok(()),
        _ => Err(Error::Parse {
            source_name: source_name.to_string(),
            line: 1,
            detail: format!("expected header `{header}`"),
        }),
    }
}

/// Reads the CSV written by [`table_to_csv`]. Counts are authoritative; the
/// rounded accuracy column must agree with them.
pub fn parse_csv(text: &str, source_name: &str) -> Result<CellTable> {
    check_header(text, CSV_HEADER, source_name)?;
    let mut table = CellTable::default();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = i + 1;
        let err = |detail: String| Error::Parse {
            source_name: source_name.to_string(),
            line: line_no,
            detail,
        };
        let f = fields(line, 6, source_name, line_no)?;
        let condition: ConditionTag = f[0].parse().map_err(|e: Error| err(e.to_string()))?;
        let bin: SizeBin = f[1].parse().map_err(|e: Error| err(e.to_string()))?;
        let n: usize = f[2]
            .parse()
            .map_err(|_| err(format!("bad count `{}`", f[2])))?;
        let correct: usize = f[3]
            .parse()
            .map_err(|_| err(format!("bad count `{}`", f[3])))?;
        if correct > n {
            return Err(err(format!("{correct} correct out of {n}")));
        }
        let stats = CellStats { n, correct };
        if f[4] != format!("{:.4}", stats.accuracy()) {
            return Err(err(format!(
                "accuracy `{}` disagrees with {correct}/{n}",
                f[4]
            )));
        }
        if table.cells.insert((condition, bin), stats).is_some() {
            return Err(err(format!("duplicate cell {condition}/{}", bin.as_str())));
        }
    }
    Ok(table)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlotRow {
    pub condition: ConditionTag,
    pub size_bin: SizeBin,
    pub accuracy: f64,
    pub sem: f64,
}

pub fn parse_plotdata(text: &str, source_name: &str) -> Result<Vec<PlotRow>> {
    check_header(text, PLOT_HEADER, source_name)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = i + 1;
        let err = |detail: String| Error::Parse {
            source_name: source_name.to_string(),
            line: line_no,
            detail,
        };
        let f = fields(line, 4, source_name, line_no)?;
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| err(format!("bad number `{s}`")))
        };
        rows.push(PlotRow {
            condition: f[0].parse().map_err(|e: Error| err(e.to_string()))?,
            size_bin: f[1].parse().map_err(|e: Error| err(e.to_string()))?,
            accuracy: num(f[2])?,
            sem: num(f[3])?,
        });
    }
    Ok(rows)
}

/// Writes `<stem>.<ext>` under `dir` and returns the path.
pub fn emit_report(
    table: &CellTable,
    format: ReportFormat,
    dir: &Path,
    stem: &str,
) -> Result<std::path::PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(format!("{stem}.{}", format.extension()));
    let text = match format {
        ReportFormat::Csv => table_to_csv(table),
        ReportFormat::PlotData => table_to_plotdata(table),
    };
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
