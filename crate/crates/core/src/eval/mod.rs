//! Condition-stratified evaluation, performance vectors and correlations,
//! report files, and the ablation suite.

mod emit;
mod report;
mod suite;
mod vector;

pub use emit::{
    emit_report, parse_csv, parse_plotdata, table_to_csv, table_to_plotdata, PlotRow, ReportFormat,
    CSV_HEADER, PLOT_HEADER,
};
pub use report::{evaluate, CellStats, CellTable, EvalReport, Head, Outcome};
pub use suite::{ablation_suite, AblationSuite, VariantResult};
pub use vector::{pearson, pearson_values, PerformanceVector, VECTOR_GROUPS, VECTOR_HEADER};
