use std::path::Path;

use crate::error::{Error, Result};
use crate::synth::{ConditionTag, SizeBin};

use super::report::{CellStats, CellTable};

/// Condition groups of the 12-cell vector, in order. No-context merges both
/// blanking modes and Size merges the three scale factors.
pub const VECTOR_GROUPS: [&str; 6] = [
    "normal",
    "nocontext",
    "gravity",
    "cooccur",
    "cooccur_gravity",
    "size",
];

pub const VECTOR_HEADER: &str = "cell\taccuracy";

fn group_of(c: ConditionTag) -> &'static str {
    match c {
        ConditionTag::Normal => "normal",
        ConditionTag::NoContextGrey | ConditionTag::NoContextSaltPepper => "nocontext",
        ConditionTag::Gravity => "gravity",
        ConditionTag::CoOccur => "cooccur",
        ConditionTag::CoOccurGravity => "cooccur_gravity",
        ConditionTag::Size2 | ConditionTag::Size3 | ConditionTag::Size4 => "size",
    }
}

/// Ordered `(label, accuracy)` cells, labels like `gravity/small`. The order
/// is group-major over [`VECTOR_GROUPS`] with small before large; cells with
/// no samples are left out.
#[derive(Clone, Debug, PartialEq)]
pub struct PerformanceVector {
    pub cells: Vec<(String, f64)>,
}

impl PerformanceVector {
    pub fn new(cells: Vec<(String, f64)>) -> Result<Self> {
        for (i, (label, _)) in cells.iter().enumerate() {
            if cells[..i].iter().any(|(l, _)| l == label) {
                return Err(Error::Input(format!("duplicate cell label {label}")));
            }
        }
        Ok(PerformanceVector { cells })
    }

    pub fn from_table(table: &CellTable) -> Self {
        let mut cells = Vec::new();
        for group in VECTOR_GROUPS {
            for bin in SizeBin::ALL {
                let mut s = CellStats::default();
                for c in ConditionTag::ALL.iter().filter(|c| group_of(**c) == group) {
                    s.merge(&table.get(*c, bin));
                }
                if s.n > 0 {
                    cells.push((format!("{group}/{}", bin.as_str()), s.accuracy()));
                }
            }
        }
        PerformanceVector { cells }
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn values(&self) -> Vec<f64> {
        self.cells.iter().map(|(_, v)| *v).collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = format!("{VECTOR_HEADER}\n");
        for (label, v) in &self.cells {
            out.push_str(&format!("{label}\t{v:.4}\n"));
        }
        out
    }

    pub fn parse(text: &str, source_name: &str) -> Result<Self> {
        let err = |line: usize, detail: String| Error::Parse {
            source_name: source_name.to_string(),
            line,
            detail,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim_end() == VECTOR_HEADER => {}
            _ => return Err(err(1, format!("expected header `{VECTOR_HEADER}`"))),
        }
        let mut cells = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let (Some(label), Some(v), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(err(i + 1, "expected two tab-separated fields".into()));
            };
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| err(i + 1, format!("bad accuracy `{v}`")))?;
            if !v.is_finite() {
                return Err(err(i + 1, format!("bad accuracy `{v}`")));
            }
            cells.push((label.to_string(), v));
        }
        PerformanceVector::new(cells).map_err(|e| err(0, e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

/// Pearson product-moment correlation between two vectors with the same
/// labels in the same order.
pub fn pearson(a: &PerformanceVector, b: &PerformanceVector) -> Result<f64> {
    if a.len() != b.len() || a.cells.iter().zip(&b.cells).any(|(x, y)| x.0 != y.0) {
        return Err(Error::Input(
            "performance vectors have different cells".into(),
        ));
    }
    pearson_values(&a.values(), &b.values())
}

pub fn pearson_values(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Input(format!(
            "lengths differ: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::Input("need at least two cells".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "a vector has zero variance".into(),
        ));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}
