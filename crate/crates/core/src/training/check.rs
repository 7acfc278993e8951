use serde::Serialize;

use super::loss::forward_trial;
use crate::domain::{Ablation, ModelConfig};
use crate::error::{Error, Result};
use crate::model::{Model, PreparedTrial};
use crate::numerics::{grad_check_terms, GradCheckConfig, GradCheckReport, Objective};

/// Finite-difference check of the total teacher-forced loss on one trial,
/// covering every registered parameter. The numeric side differences the
/// three loss terms separately.
pub fn check_loss_gradients(model: &Model, trial: &PreparedTrial, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    grad_check_terms(
        &model.params,
        |g, s| {
            let l = forward_trial(g, s, &model.config, trial)?.losses;
            Ok(Objective {
                total: l.total,
                terms: vec![l.txt, l.xy, l.token],
            })
        },
        cfg,
    )
}

#[derive(Clone, Debug, Serialize)]
pub struct VariantCheck {
    pub ablation: Ablation,
    pub report: GradCheckReport,
}

/// Runs the check on a fresh model for each variant, so the linear head and
/// the early-fusion projection are exercised along with the full model.
pub fn check_variants(
    base: &ModelConfig,
    variants: &[Ablation],
    trial: &PreparedTrial,
    seed: u64,
    cfg: &GradCheckConfig,
) -> Result<Vec<VariantCheck>> {
    variants
        .iter()
        .map(|&ablation| {
            let model = Model::new(base.clone().with_ablation(ablation), seed)?;
            let report = check_loss_gradients(&model, trial, cfg).map_err(|e| Error::Ablation {
                config: ablation.name().into(),
                source: Box::new(e),
            })?;
            Ok(VariantCheck { ablation, report })
        })
        .collect()
}
