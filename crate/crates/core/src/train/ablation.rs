use super::data::Pair;
use super::eval::evaluate;
use super::pipeline::{Pipeline, DEFAULT_RESTORE_BIN};
use super::stage2::train_stage2;
use super::to_csv;
use crate::config::Stage2Config;
use crate::error::{Error, Result};

/// One row of the ablation grid: which of the three components is enabled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationVariant {
    pub name: &'static str,
    pub condition: bool,
    pub dual_codebook: bool,
    pub quality_loss: bool,
}

/// Rows (a) to (d): baseline, then score condition, dual codebook and
/// quality loss switched on cumulatively.
pub const ABLATION_VARIANTS: [AblationVariant; 4] = [
    AblationVariant { name: "a_baseline", condition: false, dual_codebook: false, quality_loss: false },
    AblationVariant { name: "b_condition", condition: true, dual_codebook: false, quality_loss: false },
    AblationVariant { name: "c_dual_codebook", condition: true, dual_codebook: true, quality_loss: false },
    AblationVariant { name: "d_quality_loss", condition: true, dual_codebook: true, quality_loss: true },
];

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: AblationVariant,
    /// Mean eval ensemble score when restoring at bin 9.
    pub ensemble_bin9: f64,
    pub ensemble_bin0: f64,
    pub holdout_bin9: f64,
    pub l1_bin9: f64,
}

impl AblationRow {
    pub const HEADER: [&'static str; 9] = [
        "variant",
        "score_condition",
        "dual_codebook",
        "quality_loss",
        "ensemble_bin9",
        "ensemble_bin0",
        "gap_bin9_minus_bin0",
        "holdout_bin9",
        "l1_bin9",
    ];

    pub fn fields(&self) -> Vec<String> {
        vec![
            self.variant.name.to_string(),
            self.variant.condition.to_string(),
            self.variant.dual_codebook.to_string(),
            self.variant.quality_loss.to_string(),
            self.ensemble_bin9.to_string(),
            self.ensemble_bin0.to_string(),
            (self.ensemble_bin9 - self.ensemble_bin0).to_string(),
            self.holdout_bin9.to_string(),
            self.l1_bin9.to_string(),
        ]
    }

    pub fn csv(rows: &[AblationRow]) -> String {
        to_csv(&Self::HEADER, rows.iter().map(Self::fields))
    }
}

/// Trains stage II once per variant and evaluates each on `eval`.
///
/// `single` and `dual` are stage-I pipelines trained without and with the
/// HQ+ codebook; variants pick the matching one. `base` supplies every
/// stage-II setting the grid does not vary.
pub fn run_ablation(
    single: &Pipeline,
    dual: &Pipeline,
    train: &[Pair],
    eval: &[Pair],
    base: &Stage2Config,
) -> Result<Vec<AblationRow>> {
    if single.dual_codebook || !dual.dual_codebook {
        return Err(Error::Argument("ablation needs one single-codebook and one dual-codebook stage-I model".into()));
    }
    ABLATION_VARIANTS
        .iter()
        .map(|&variant| {
            let cfg = Stage2Config {
                condition: variant.condition,
                lambda2: if variant.quality_loss { base.lambda2 } else { 0.0 },
                ..base.clone()
            };
            let stage1 = if variant.dual_codebook { dual } else { single };
            let pipe = train_stage2(train, &cfg, stage1)?.pipeline;
            let rows = evaluate(&pipe, eval, &[DEFAULT_RESTORE_BIN, 0])?;
            Ok(AblationRow {
                variant,
                ensemble_bin9: rows[0].ensemble_mean,
                ensemble_bin0: rows[1].ensemble_mean,
                holdout_bin9: rows[0].holdout_mean,
                l1_bin9: rows[0].l1,
            })
        })
        .collect()
}
