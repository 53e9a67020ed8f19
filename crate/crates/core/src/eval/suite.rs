use std::path::Path;
use std::time::Instant;

use crate::error::Result;
use crate::model::{Crtnet, ModelConfig};
use crate::train::{train_loop, Ablation, EpochMetrics, Example, TrainConfig, Trainer};

use super::report::{evaluate, EvalReport, Head};
use super::vector::{pearson, PerformanceVector};

/// One trained and evaluated ablation variant.
#[derive(Clone, Debug)]
pub struct VariantResult {
    pub ablation: Ablation,
    pub model: Crtnet,
    pub log: Vec<EpochMetrics>,
    pub report: EvalReport,
    pub vector: PerformanceVector,
    /// Wall-clock training time.
    pub train_seconds: f64,
}

impl VariantResult {
    /// Distinct scalars in the target and context encoders.
    pub fn encoder_scalars(&self) -> usize {
        self.model.params.count_with_prefix("encoder.")
    }
}

#[derive(Clone, Debug)]
pub struct AblationSuite {
    pub variants: Vec<VariantResult>,
    /// Pearson between the vectors of each pair of variants, `None` when a
    /// vector is constant.
    pub correlations: Vec<(Ablation, Ablation, Option<f64>)>,
}

impl AblationSuite {
    pub fn variant(&self, ablation: Ablation) -> Option<&VariantResult> {
        self.variants.iter().find(|v| v.ablation == ablation)
    }

    /// Side-by-side accuracy table followed by the correlation matrix.
    pub fn summary(&self) -> String {
        let mut out =
            String::from("variant          acc_yp  acc_yt  acc_ytc mean_p  encoder_scalars\n");
        for v in &self.variants {
            let all = |h| v.report.stats(h, |_| true).accuracy();
            let p =
                v.report.outcomes.iter().map(|o| o.p).sum::<f64>() / v.report.outcomes.len() as f64;
            out.push_str(&format!(
                "{:<16} {:.4}  {:.4}  {:.4}  {:.4}  {}\n",
                v.ablation.as_str(),
                all(Head::Fused),
                all(Head::Target),
                all(Head::Context),
                p,
                v.encoder_scalars()
            ));
        }
        out.push_str("\npearson");
        for v in &self.variants {
            out.push_str(&format!(" {:>15}", v.ablation.as_str()));
        }
        out.push('\n');
        for a in &self.variants {
            out.push_str(&format!("{:<7}", ""));
            for b in &self.variants {
                let r = self
                    .correlations
                    .iter()
                    .find(|(x, y, _)| *x == a.ablation && *y == b.ablation)
                    .and_then(|c| c.2);
                match r {
                    Some(r) => out.push_str(&format!(" {r:>15.2}")),
                    None => out.push_str(&format!(" {:>15}", "undefined")),
                }
            }
            out.push_str(&format!("  {}\n", a.ablation.as_str()));
        }
        out
    }
}

/// Trains every variant in `ablations` on the same data with the same seed
/// and evaluates it on `test`. When `out_dir` is given each variant keeps
/// its checkpoints and metrics under `<out_dir>/<variant>`.
pub fn ablation_suite(
    ablations: &[Ablation],
    train: &[Example],
    test: &[Example],
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    out_dir: Option<&Path>,
    threads: usize,
) -> Result<AblationSuite> {
    let mut variants = Vec::with_capacity(ablations.len());
    for &ablation in ablations {
        let config = TrainConfig {
            ablation,
            ..train_config.clone()
        };
        let mut trainer = Trainer::new(model_config.clone(), config)?;
        let start = Instant::now();
        let log = match out_dir {
            Some(dir) => train_loop(&mut trainer, train, None, &dir.join(ablation.as_str()))?,
            None => (0..trainer.config.epochs)
                .map(|_| trainer.run_epoch(train))
                .collect::<Result<_>>()?,
        };
        let train_seconds = start.elapsed().as_secs_f64();
        let report = evaluate(&trainer.model, test, None, threads)?;
        let vector = PerformanceVector::from_table(&report.table());
        variants.push(VariantResult {
            ablation,
            model: trainer.model,
            log,
            report,
            vector,
            train_seconds,
        });
    }
    let mut correlations = Vec::new();
    for a in &variants {
        for b in &variants {
            correlations.push((a.ablation, b.ablation, pearson(&a.vector, &b.vector).ok()));
        }
    }
    Ok(AblationSuite {
        variants,
        correlations,
    })
}
