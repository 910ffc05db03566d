//! Evaluation metrics for intrinsic decompositions.
//!
//! All image arguments are planar `[C, H, W]` tensors with values in `[0, 1]`
//! (shading may exceed 1); masks are `[1, H, W]`.

pub mod dense;
pub mod eval;
pub mod report;
pub mod sparse;

pub use dense::{default_window, lmse, lmse_decomposition, mace, mre, MreResult};
pub use eval::{evaluate_dataset, EvalOptions, MetricKind, Prediction};
pub use report::{assemble_report, parse_report, radar_svg, report_to_csv, MetricsReport, ReportRow, Scores};
pub use sparse::{
    judgements_from_albedo, labels_from_shading, saw_pr, whdr, Judgement, JudgementSet, Relation, SawResult,
    ShadingLabel, ShadingLabels,
};

use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("{what}: expected shape {expected:?}, got {got:?}")]
    Shape {
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Degenerate(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

pub(crate) fn planar(what: &'static str, t: &Tensor) -> Result<(usize, usize, usize), MetricError> {
    match *t.shape() {
        [c, h, w] if c > 0 && h > 0 && w > 0 => Ok((c, h, w)),
        _ => Err(MetricError::Shape {
            what,
            expected: vec![3, 0, 0],
            got: t.shape().to_vec(),
        }),
    }
}
