//! Training: the three losses, detachment wiring per ablation, optimizers,
//! the epoch loop, metrics log and resumable checkpoints.

mod config;
mod data;
mod engine;
mod losses;
mod optim;

pub use config::{config_hash, Ablation, OptimizerKind, TrainConfig};
pub use data::{check_labels, load_examples, Example};
pub use engine::{
    checkpoint_path, measure, read_metrics, train_loop, write_metrics, BatchGradients,
    EpochMetrics, Tally, Trainer, METRICS_FILE, METRICS_HEADER,
};
pub use losses::{compute_losses, graph_losses, GraphLosses, LossBundle};
pub use optim::Optimizer;
