//! Training loops, restoration, quality optimization and evaluation.

mod ablation;
mod data;
mod eval;
mod optimize;
mod pipeline;
mod stage1;
mod stage2;

pub use ablation::{run_ablation, AblationRow, AblationVariant, ABLATION_VARIANTS};
pub use data::{make_pairs, score_images, split_holdout, HqSample, Pair};
pub use eval::{eval_csv, evaluate, EvalRow, EVAL_HEADER};
pub use optimize::{optimize_quality_continuous, optimize_quality_discrete, OptimizeTrace};
pub use pipeline::{Pipeline, DEFAULT_RESTORE_BIN, UNCONDITIONED_BIN};
pub use stage1::{
    discriminator_objective, stage1_generator_objective, train_stage1, Stage1Output, Stage1Record, Stage1Terms,
    Stage1Vars,
};
pub use stage2::{
    stage2_objective, stage2_start, train_stage2, Stage2Losses, Stage2Output, Stage2Record, Stage2Setup, Stage2Target,
    Stage2Vars,
};

/// How gradients cross the non-differentiable code selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradPath {
    /// Straight-through: the forward pass uses the selected codes, the
    /// backward pass treats selection as the identity (training).
    StraightThrough,
    /// The recorded function is exactly what is differentiated: quantized
    /// features feed the decoder directly, the code feature loss drops its
    /// stop-gradients and stage-II soft code mixtures replace the hard
    /// selection. Used for finite-difference checks.
    Exact,
}

/// Renders rows as CSV with a header.
pub fn to_csv(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}
