//! Failure-risk models: dummy-coded logistic regression of FN/FP outcomes
//! on subgroup variables, Wald inference and odds-ratio to risk-ratio
//! conversion.

mod design;
mod effects;
mod fit;

use serde::{Deserialize, Serialize};

use crate::records::{PredictionRecord, Variable};

pub use design::{build_design, ColumnLabel, RegressionDesign};
pub use effects::{
    default_prevalence_rules, or_to_rr, p0_control_share, risk_table, rr_to_p0, ControlIncidence,
    ControlShare, Effect, EffectRow, PrevalenceRegistry, PrevalenceRule, RiskMode, RiskOptions,
    RiskTable, UnivariateTest,
};
pub use fit::{fit_mle, fit_mle_with, wald, FitOptions, FitResult, WaldStat};

/// Which failure is modelled, and on which records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OutcomeKind {
    /// Missed abnormal patches, modelled on truth = 1 records.
    FalseNegative,
    /// False alarms on normal patches, modelled on truth = 0 records.
    FalsePositive,
}

impl OutcomeKind {
    pub fn population(self, r: &PredictionRecord) -> bool {
        match self {
            OutcomeKind::FalseNegative => r.truth,
            OutcomeKind::FalsePositive => !r.truth,
        }
    }

    pub fn is_failure(self, r: &PredictionRecord, predicted: bool) -> bool {
        self.population(r) && predicted != r.truth
    }

    /// Lesion-level variables only exist on abnormal patches.
    pub fn applies_to(self, v: Variable) -> bool {
        self == OutcomeKind::FalseNegative || !v.is_lesion_level()
    }

    pub fn label(self) -> &'static str {
        match self {
            OutcomeKind::FalseNegative => "false negatives",
            OutcomeKind::FalsePositive => "false positives",
        }
    }

    pub fn population_label(self) -> &'static str {
        match self {
            OutcomeKind::FalseNegative => "abnormal",
            OutcomeKind::FalsePositive => "normal",
        }
    }

    /// Name of the per-subgroup failure rate metric.
    pub fn rate_metric(self) -> &'static str {
        match self {
            OutcomeKind::FalseNegative => "fnr",
            OutcomeKind::FalsePositive => "fpr",
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            OutcomeKind::FalseNegative => "fn",
            OutcomeKind::FalsePositive => "fp",
        }
    }
}
