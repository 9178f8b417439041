use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::OutcomeKind;
use crate::error::{Error, Result};
use crate::records::{derive_predicted, FactorSchema, PredictionRecord, Variable};

/// What a design-matrix column encodes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnLabel {
    /// `None` for the intercept.
    pub variable: Option<Variable>,
    pub level: String,
    pub control: String,
}

impl ColumnLabel {
    pub fn intercept() -> Self {
        Self {
            variable: None,
            level: "(intercept)".into(),
            control: String::new(),
        }
    }

    pub fn name(&self) -> String {
        match self.variable {
            Some(v) => format!("{v}={}", self.level),
            None => self.level.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RegressionDesign {
    pub outcome: OutcomeKind,
    /// 1.0 = failure (FN or FP), 0.0 = correct prediction.
    pub y: Vec<f64>,
    pub x: DMatrix<f64>,
    pub columns: Vec<ColumnLabel>,
    /// Population rows dropped for missing values of an included variable.
    pub dropped: usize,
    /// Declared non-control levels with no rows, omitted from the design.
    pub unobserved: Vec<(Variable, String)>,
}

impl RegressionDesign {
    pub fn rows(&self) -> usize {
        self.y.len()
    }

    pub fn column_index(&self, variable: Variable, level: &str) -> Option<usize> {
        self.columns
            .iter()
            .position(|c| c.variable == Some(variable) && c.level == level)
    }
}

/// Dummy-coded design for one failure outcome.
///
/// Each included variable contributes one indicator per observed
/// non-control level; finding flags therefore enter as single columns.
pub fn build_design<'a>(
    records: impl IntoIterator<Item = &'a PredictionRecord>,
    schema: &FactorSchema,
    variables: &[Variable],
    outcome: OutcomeKind,
    threshold: f64,
) -> Result<RegressionDesign> {
    let specs = variables
        .iter()
        .map(|&v| {
            if !outcome.applies_to(v) {
                return Err(Error::Design(format!(
                    "variable `{v}` is lesion-level and does not apply to {}",
                    outcome.label()
                )));
            }
            schema.require(v)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut dropped = 0;
    let mut rows: Vec<&PredictionRecord> = Vec::new();
    let mut y = Vec::new();
    for r in records.into_iter().filter(|r| outcome.population(r)) {
        if specs.iter().any(|s| r.level(s.variable).is_none()) {
            dropped += 1;
            continue;
        }
        y.push(if outcome.is_failure(r, derive_predicted(r, threshold)?) {
            1.0
        } else {
            0.0
        });
        rows.push(r);
    }
    if rows.is_empty() {
        return Err(Error::Design(format!(
            "no complete {} records for the requested variables",
            outcome.population_label()
        )));
    }

    let mut columns = vec![ColumnLabel::intercept()];
    let mut unobserved = Vec::new();
    for spec in &specs {
        let observed: Vec<&str> = spec
            .levels
            .iter()
            .map(String::as_str)
            .filter(|l| rows.iter().any(|r| r.level(spec.variable) == Some(*l)))
            .collect();
        if observed.len() < 2 {
            return Err(Error::Design(format!(
                "variable `{}` has fewer than 2 observed levels",
                spec.variable
            )));
        }
        for level in spec.non_control_levels() {
            if observed.contains(&level) {
                columns.push(ColumnLabel {
                    variable: Some(spec.variable),
                    level: level.to_string(),
                    control: spec.control.clone(),
                });
            } else {
                unobserved.push((spec.variable, level.to_string()));
            }
        }
    }

    let x = DMatrix::from_fn(rows.len(), columns.len(), |i, j| {
        let col = &columns[j];
        match col.variable {
            None => 1.0,
            Some(v) => {
                if rows[i].level(v) == Some(col.level.as_str()) {
                    1.0
                } else {
                    0.0
                }
            }
        }
    });

    let gram = x.transpose() * &x;
    if gram.cholesky().is_none() {
        return Err(Error::SingularInformation);
    }

    Ok(RegressionDesign {
        outcome,
        y,
        x,
        columns,
        dropped,
        unobserved,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn positive(i: usize, race: &str, predicted: bool) -> PredictionRecord {
        let mut r = PredictionRecord::new(format!("p{i}"), "x", true);
        r.predicted = Some(predicted);
        r.race = Some(race.into());
        r
    }

    #[test]
    fn race_only_design() {
        let rs = vec![
            positive(0, "White", true),
            positive(1, "Black", false),
            positive(2, "Other", true),
            positive(3, "White", false),
            positive(4, "Black", true),
        ];
        let d = build_design(
            &rs,
            &FactorSchema::mammography(),
            &[Variable::Race],
            OutcomeKind::FalseNegative,
            0.5,
        )
        .unwrap();
        assert_eq!(d.x.ncols(), 3);
        assert_eq!(d.columns[1].level, "Black");
        assert_eq!(d.columns[2].level, "Other");
        assert_eq!(d.y, vec![0.0, 1.0, 0.0, 1.0, 0.0]);
        assert_eq!(d.x[(1, 1)], 1.0);
        assert_eq!(d.x[(0, 1)], 0.0);
    }

    #[test]
    fn missing_rows_are_dropped() {
        let mut rs = vec![positive(0, "White", true), positive(1, "Black", false)];
        let mut missing = positive(2, "White", true);
        missing.race = None;
        rs.push(missing);
        let d = build_design(
            &rs,
            &FactorSchema::mammography(),
            &[Variable::Race],
            OutcomeKind::FalseNegative,
            0.5,
        )
        .unwrap();
        assert_eq!(d.rows(), 2);
        assert_eq!(d.dropped, 1);
        assert_eq!(d.unobserved, vec![(Variable::Race, "Other".to_string())]);
    }

    #[test]
    fn single_level_and_lesion_errors() {
        let rs = vec![positive(0, "White", true), positive(1, "White", false)];
        let schema = FactorSchema::mammography();
        assert!(matches!(
            build_design(&rs, &schema, &[Variable::Race], OutcomeKind::FalseNegative, 0.5),
            Err(Error::Design(_))
        ));
        assert!(matches!(
            build_design(&rs, &schema, &[Variable::Mass], OutcomeKind::FalsePositive, 0.5),
            Err(Error::Design(_))
        ));
        // Only positives present: FP design is empty.
        assert!(build_design(&rs, &schema, &[Variable::Race], OutcomeKind::FalsePositive, 0.5)
            .is_err());
    }
}
