//! Relative device importance from embedding-exclusion losses.

use serde::{Deserialize, Serialize};

use crate::vfl_engine::{TrainingState, VflError};

pub const GAMMA_MIN: f64 = 1.0;
pub const DEFAULT_GAMMA_MAX: f64 = 2.0;

/// How exclusion losses are spread over `[γ_min, γ_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceScaling {
    /// Affine min–max map of the loss values.
    #[default]
    Value,
    /// Evenly spaced by dense rank of the losses.
    Rank,
}

/// Training loss with each listed device's embedding block zeroed, one device
/// at a time.
pub fn exclusion_losses(state: &TrainingState, ids: &[usize]) -> Result<Vec<f64>, VflError> {
    ids.iter().map(|&id| state.loss_excluding(id)).collect()
}

/// Maps exclusion losses onto `[GAMMA_MIN, gamma_max]`; a larger loss means a
/// more important device. All-equal losses give `GAMMA_MIN` everywhere.
pub fn scale_importance(losses: &[f64], gamma_max: f64, scaling: ImportanceScaling) -> Vec<f64> {
    let lo = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if losses.is_empty() || !(hi > lo) {
        return vec![GAMMA_MIN; losses.len()];
    }
    let span = gamma_max - GAMMA_MIN;
    match scaling {
        ImportanceScaling::Value => losses
            .iter()
            .map(|&l| GAMMA_MIN + span * (l - lo) / (hi - lo))
            .collect(),
        ImportanceScaling::Rank => {
            let mut distinct = losses.to_vec();
            distinct.sort_by(|a, b| a.total_cmp(b));
            distinct.dedup();
            let top = (distinct.len() - 1) as f64;
            losses
                .iter()
                .map(|l| {
                    let rank = distinct.partition_point(|d| d < l) as f64;
                    GAMMA_MIN + span * rank / top
                })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoint_examples() {
        assert_eq!(scale_importance(&[2.0, 1.0], 2.0, ImportanceScaling::Value), vec![2.0, 1.0]);
        assert_eq!(
            scale_importance(&[3.0, 2.0, 1.0], 3.0, ImportanceScaling::Value),
            vec![3.0, 2.0, 1.0]
        );
        assert_eq!(scale_importance(&[0.7; 4], 2.0, ImportanceScaling::Value), vec![1.0; 4]);
        assert!(scale_importance(&[], 2.0, ImportanceScaling::Value).is_empty());
    }

    #[test]
    fn rank_scaling_spaces_evenly() {
        let g = scale_importance(&[10.0, 0.1, 0.2, 0.2], 3.0, ImportanceScaling::Rank);
        assert_eq!(g, vec![3.0, 1.0, 2.0, 2.0]);
    }
}
