use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{argmax, Crtnet, FusionMode};
use crate::synth::{ConditionTag, SizeBin};
use crate::train::{check_labels, Example};

/// Count of trials and correct answers in one group.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CellStats {
    pub n: usize,
    pub correct: usize,
}

impl CellStats {
    pub fn accuracy(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.correct as f64 / self.n as f64
        }
    }

    /// Binomial standard error `sqrt(acc (1 - acc) / n)`.
    pub fn sem(&self) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        let a = self.accuracy();
        (a * (1.0 - a) / self.n as f64).sqrt()
    }

    pub fn add(&mut self, correct: bool) {
        self.n += 1;
        self.correct += correct as usize;
    }

    pub fn merge(&mut self, other: &CellStats) {
        self.n += other.n;
        self.correct += other.correct;
    }
}

/// What the model said about one example.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Outcome {
    pub label: usize,
    pub condition: ConditionTag,
    pub size_bin: SizeBin,
    pub top_yp: usize,
    pub top_yt: usize,
    pub top_ytc: usize,
    pub p: f64,
}

/// Accuracy per `(condition, size_bin)` cell.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CellTable {
    pub cells: BTreeMap<(ConditionTag, SizeBin), CellStats>,
}

impl CellTable {
    pub fn overall(&self) -> CellStats {
        let mut all = CellStats::default();
        for c in self.cells.values() {
            all.merge(c);
        }
        all
    }

    pub fn get(&self, condition: ConditionTag, bin: SizeBin) -> CellStats {
        self.cells
            .get(&(condition, bin))
            .copied()
            .unwrap_or_default()
    }
}

/// Which output is scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Fused,
    Target,
    Context,
}

impl Outcome {
    pub fn correct(&self, head: Head) -> bool {
        let top = match head {
            Head::Fused => self.top_yp,
            Head::Target => self.top_yt,
            Head::Context => self.top_ytc,
        };
        top == self.label
    }
}

/// Condition-stratified evaluation of one model on one test set.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub num_classes: usize,
    pub outcomes: Vec<Outcome>,
}

impl EvalReport {
    pub fn from_outcomes(num_classes: usize, outcomes: Vec<Outcome>) -> Self {
        EvalReport {
            num_classes,
            outcomes,
        }
    }

    /// Fused-prediction accuracy per `(condition, size_bin)`.
    pub fn table(&self) -> CellTable {
        let mut t = CellTable::default();
        for o in &self.outcomes {
            t.cells
                .entry((o.condition, o.size_bin))
                .or_default()
                .add(o.correct(Head::Fused));
        }
        t
    }

    pub fn overall(&self) -> CellStats {
        self.stats(Head::Fused, |_| true)
    }

    pub fn per_class(&self) -> Vec<CellStats> {
        let mut v = vec![CellStats::default(); self.num_classes];
        for o in &self.outcomes {
            v[o.label].add(o.correct(Head::Fused));
        }
        v
    }

    pub fn mean_confidence(&self) -> BTreeMap<ConditionTag, f64> {
        let mut sums: BTreeMap<ConditionTag, (f64, usize)> = BTreeMap::new();
        for o in &self.outcomes {
            let e = sums.entry(o.condition).or_default();
            e.0 += o.p;
            e.1 += 1;
        }
        sums.into_iter()
            .map(|(c, (s, n))| (c, s / n as f64))
            .collect()
    }

    /// Accuracy of `head` over the outcomes selected by `keep`.
    pub fn stats(&self, head: Head, keep: impl Fn(&Outcome) -> bool) -> CellStats {
        let mut s = CellStats::default();
        for o in self.outcomes.iter().filter(|o| keep(o)) {
            s.add(o.correct(head));
        }
        s
    }

    /// Human-readable table, one line per cell.
    pub fn summary(&self) -> String {
        let mut out = String::from("condition             size   n      acc     sem\n");
        for ((c, b), s) in &self.table().cells {
            out.push_str(&format!(
                "{:<21} {:<6} {:<6} {:.4}  {:.4}\n",
                c.as_str(),
                b.as_str(),
                s.n,
                s.accuracy(),
                s.sem()
            ));
        }
        let all = self.overall();
        out.push_str(&format!(
            "{:<21} {:<6} {:<6} {:.4}  {:.4}\n",
            "overall",
            "",
            all.n,
            all.accuracy(),
            all.sem()
        ));
        out
    }
}

/// Runs the model on every example with dropout off. `fusion` replaces the
/// model's fusion rule for this evaluation only; `threads` splits the work
/// without changing the result.
pub fn evaluate(
    model: &Crtnet,
    data: &[Example],
    fusion: Option<FusionMode>,
    threads: usize,
) -> Result<EvalReport> {
    check_labels(data, model.config.num_classes)?;
    let mut model = model.clone();
    if let Some(f) = fusion {
        model.config.fusion_mode = f;
    }
    let model = &model;
    let one = |ex: &Example| -> Result<Outcome> {
        let pred = model.predict_prepared(&ex.prepare(&model.config)?)?;
        Ok(Outcome {
            label: ex.label,
            condition: ex.condition,
            size_bin: ex.size_bin,
            top_yp: argmax(pred.y_p.data()),
            top_yt: argmax(pred.y_t.data()),
            top_ytc: argmax(pred.y_tc.data()),
            p: pred.p,
        })
    };
    let threads = threads.clamp(1, data.len().max(1));
    let outcomes: Vec<Outcome> = if threads == 1 {
        data.iter().map(one).collect::<Result<_>>()?
    } else {
        let chunk = data.len().div_ceil(threads);
        let parts: Vec<Result<Vec<Outcome>>> = std::thread::scope(|s| {
            let handles: Vec<_> = data
                .chunks(chunk)
                .map(|part| s.spawn(move || part.iter().map(one).collect::<Result<Vec<_>>>()))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation thread panicked"))
                .collect()
        });
        let mut all = Vec::with_capacity(data.len());
        for p in parts {
            all.extend(p?);
        }
        all
    };
    if outcomes.is_empty() {
        return Err(Error::Input("nothing to evaluate".into()));
    }
    Ok(EvalReport::from_outcomes(
        model.config.num_classes,
        outcomes,
    ))
}
