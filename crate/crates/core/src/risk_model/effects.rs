use serde::{Deserialize, Serialize};

use super::design::build_design;
use super::fit::{fit_mle_with, wald, FitOptions, WaldStat};
use super::OutcomeKind;
use crate::error::{Error, Result};
use crate::metrics::{default_metrics, Metric};
use crate::records::{derive_predicted, FactorSchema, PredictionRecord, Variable, VariableSpec};
use crate::registry::{Named, Registry};
use crate::resample::{run_bootstrap, BootstrapSpec, CiMethod, NormalCi, RecordFilter};
use crate::seed::derive_seed;
use crate::stats_tests::{welch_t, TestResult};

/// RR = OR / (1 - P0 + P0 * OR).
pub fn or_to_rr(or: f64, p0: f64) -> Result<f64> {
    if !(or.is_finite() && or > 0.0) {
        return Err(Error::Domain(format!("odds ratio must be positive and finite, got {or}")));
    }
    if !(0.0..=1.0).contains(&p0) {
        return Err(Error::Domain(format!("P0 must lie in [0, 1], got {p0}")));
    }
    Ok(or / (1.0 - p0 + p0 * or))
}

/// The P0 for which `or_to_rr(or, p0) == rr`.
pub fn rr_to_p0(or: f64, rr: f64) -> Result<f64> {
    if !(or > 0.0 && rr > 0.0) || or == 1.0 {
        return Err(Error::Domain(format!(
            "cannot invert OR {or}, RR {rr}: need positive values and OR != 1"
        )));
    }
    Ok((or / rr - 1.0) / (or - 1.0))
}

/// Estimator of the P0 used by the OR-to-RR conversion.
pub trait PrevalenceRule: Named + Send + Sync {
    /// `population` holds the outcome's records that carry `spec.variable`.
    fn p0(
        &self,
        population: &[&PredictionRecord],
        spec: &VariableSpec,
        outcome: OutcomeKind,
        threshold: f64,
    ) -> Result<f64>;
}

/// Share of the control level among correctly predicted records (true
/// positives for FN models, true negatives for FP models). One value per
/// variable, shared by all of its levels.
pub struct ControlShare;

impl Named for ControlShare {
    fn name(&self) -> &'static str {
        "control-share"
    }
}

impl PrevalenceRule for ControlShare {
    fn p0(
        &self,
        population: &[&PredictionRecord],
        spec: &VariableSpec,
        outcome: OutcomeKind,
        threshold: f64,
    ) -> Result<f64> {
        let (mut correct, mut control) = (0usize, 0usize);
        for r in population.iter().filter(|r| outcome.population(r)) {
            let Some(level) = r.level(spec.variable) else {
                continue;
            };
            if !outcome.is_failure(r, derive_predicted(r, threshold)?) {
                correct += 1;
                if level == spec.control {
                    control += 1;
                }
            }
        }
        if correct == 0 {
            return Err(Error::Domain(format!(
                "no correctly predicted {} records carry `{}`",
                outcome.population_label(),
                spec.variable
            )));
        }
        Ok(control as f64 / correct as f64)
    }
}

/// Failure incidence within the control level: the textbook P0.
pub struct ControlIncidence;

impl Named for ControlIncidence {
    fn name(&self) -> &'static str {
        "control-incidence"
    }
}

impl PrevalenceRule for ControlIncidence {
    fn p0(
        &self,
        population: &[&PredictionRecord],
        spec: &VariableSpec,
        outcome: OutcomeKind,
        threshold: f64,
    ) -> Result<f64> {
        let (mut total, mut failed) = (0usize, 0usize);
        for r in population
            .iter()
            .filter(|r| outcome.population(r) && r.level(spec.variable) == Some(&spec.control))
        {
            total += 1;
            if outcome.is_failure(r, derive_predicted(r, threshold)?) {
                failed += 1;
            }
        }
        if total == 0 {
            return Err(Error::Domain(format!(
                "control level `{}` of `{}` has no records",
                spec.control, spec.variable
            )));
        }
        Ok(failed as f64 / total as f64)
    }
}

pub type PrevalenceRegistry = Registry<dyn PrevalenceRule>;

pub fn default_prevalence_rules() -> PrevalenceRegistry {
    let mut reg = PrevalenceRegistry::new("prevalence rule");
    reg.register(Box::new(ControlShare))
        .register(Box::new(ControlIncidence));
    reg
}

/// Control-share P0 of `spec.variable` over `records`.
pub fn p0_control_share<'a>(
    records: impl IntoIterator<Item = &'a PredictionRecord>,
    spec: &VariableSpec,
    outcome: OutcomeKind,
    threshold: f64,
) -> Result<f64> {
    let refs: Vec<&PredictionRecord> = records.into_iter().collect();
    ControlShare.p0(&refs, spec, outcome, threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RiskMode {
    Univariate,
    Multivariate,
    Both,
}

impl RiskMode {
    fn univariate(self) -> bool {
        matches!(self, RiskMode::Univariate | RiskMode::Both)
    }

    fn multivariate(self) -> bool {
        matches!(self, RiskMode::Multivariate | RiskMode::Both)
    }
}

/// Settings for the bootstrap t-test of subgroup failure rate against the
/// control group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnivariateTest {
    pub iterations: usize,
    /// Lower end of the sample-size range; the upper end is the population
    /// size and the lower end is capped at it.
    pub min_size: usize,
    pub seed: u64,
    /// Bonferroni family size; defaults to the variable's non-control level
    /// count.
    pub family_size: Option<usize>,
}

impl Default for UnivariateTest {
    fn default() -> Self {
        Self {
            iterations: crate::resample::DEFAULT_ITERATIONS,
            min_size: 1000,
            seed: 0,
            family_size: None,
        }
    }
}

pub struct RiskOptions<'a> {
    pub threshold: f64,
    pub mode: RiskMode,
    pub prevalence: &'a dyn PrevalenceRule,
    pub fit: FitOptions,
    pub univariate_test: Option<UnivariateTest>,
    pub ci: &'a dyn CiMethod,
}

impl Default for RiskOptions<'_> {
    fn default() -> Self {
        Self {
            threshold: crate::records::DEFAULT_THRESHOLD,
            mode: RiskMode::Multivariate,
            prevalence: &ControlShare,
            fit: FitOptions::default(),
            univariate_test: None,
            ci: &NormalCi,
        }
    }
}

/// A fitted effect for one level against its control.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Effect {
    pub odds_ratio: f64,
    pub or_ci: (f64, f64),
    /// Wald p-value.
    pub p_value: f64,
    pub risk_ratio: Option<f64>,
    pub rr_ci: Option<(f64, f64)>,
}

impl Effect {
    fn from_wald(w: &WaldStat, p0: Option<f64>) -> Result<Self> {
        let odds_ratio = w.beta.exp();
        let or_ci = (w.ci_low.exp(), w.ci_high.exp());
        let (risk_ratio, rr_ci) = match p0 {
            Some(p0) => (
                Some(or_to_rr(odds_ratio, p0)?),
                Some((or_to_rr(or_ci.0, p0)?, or_to_rr(or_ci.1, p0)?)),
            ),
            None => (None, None),
        };
        Ok(Self {
            odds_ratio,
            or_ci,
            p_value: w.p,
            risk_ratio,
            rr_ci,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectRow {
    pub variable: Variable,
    pub level: String,
    pub label: String,
    pub control: String,
    pub control_label: String,
    /// Outcome-population records at this level.
    pub count: usize,
    pub p0: Option<f64>,
    pub multivariate: Option<Effect>,
    pub univariate: Option<Effect>,
    /// Bootstrap t-test of this level's failure rate against the control.
    pub rate_test: Option<TestResult>,
    pub errors: Vec<String>,
}

impl EffectRow {
    /// The effect reports lead with: multivariate when fitted.
    pub fn primary(&self) -> Option<&Effect> {
        self.multivariate.as_ref().or(self.univariate.as_ref())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskTable {
    pub outcome: OutcomeKind,
    pub mode: RiskMode,
    pub prevalence_rule: String,
    pub variables: Vec<Variable>,
    /// Outcome-population size (all records of the modelled class).
    pub population: usize,
    /// Complete-case rows of the joint model, when fitted.
    pub design_rows: Option<usize>,
    pub dropped: Option<usize>,
    pub rows: Vec<EffectRow>,
}

/// One row per non-control level of each variable, in schema order.
///
/// Fitting errors are attached to the affected rows instead of aborting.
pub fn risk_table(
    records: &[PredictionRecord],
    schema: &FactorSchema,
    variables: &[Variable],
    outcome: OutcomeKind,
    options: &RiskOptions<'_>,
) -> Result<RiskTable> {
    let population: Vec<&PredictionRecord> =
        records.iter().filter(|r| outcome.population(r)).collect();
    if population.is_empty() {
        return Err(Error::Design(format!(
            "no {} records to model",
            outcome.population_label()
        )));
    }
    let variables: Vec<Variable> = variables
        .iter()
        .copied()
        .filter(|v| outcome.applies_to(*v))
        .collect();
    let specs = variables
        .iter()
        .map(|&v| schema.require(v))
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    for spec in &specs {
        let present: Vec<&PredictionRecord> = population
            .iter()
            .copied()
            .filter(|r| r.level(spec.variable).is_some())
            .collect();
        let p0 = options
            .prevalence
            .p0(&present, spec, outcome, options.threshold);
        for level in spec.non_control_levels() {
            let mut row = EffectRow {
                variable: spec.variable,
                level: level.to_string(),
                label: spec.label(level).to_string(),
                control: spec.control.clone(),
                control_label: spec.control_label().to_string(),
                count: present
                    .iter()
                    .filter(|r| r.level(spec.variable) == Some(level))
                    .count(),
                p0: p0.as_ref().ok().copied(),
                multivariate: None,
                univariate: None,
                rate_test: None,
                errors: Vec::new(),
            };
            if let Err(e) = &p0 {
                row.errors.push(format!("P0: {e}"));
            }
            if row.count == 0 {
                row.errors.push("level not observed".into());
            }
            rows.push(row);
        }
    }

    let mut design_rows = None;
    let mut dropped = None;
    if options.mode.multivariate() {
        match fit_effects(records, schema, &variables, outcome, options) {
            Ok((effects, n, d)) => {
                design_rows = Some(n);
                dropped = Some(d);
                attach(&mut rows, effects, |row, e| row.multivariate = Some(e));
            }
            Err(e) => rows
                .iter_mut()
                .for_each(|row| row.errors.push(format!("multivariate: {e}"))),
        }
    }
    if options.mode.univariate() {
        for &v in &variables {
            match fit_effects(records, schema, &[v], outcome, options) {
                Ok((effects, _, _)) => {
                    attach(&mut rows, effects, |row, e| row.univariate = Some(e))
                }
                Err(e) => rows
                    .iter_mut()
                    .filter(|row| row.variable == v)
                    .for_each(|row| row.errors.push(format!("univariate: {e}"))),
            }
        }
    }
    if let Some(test) = &options.univariate_test {
        for spec in &specs {
            rate_tests(&population, spec, outcome, test, options, &mut rows);
        }
    }

    Ok(RiskTable {
        outcome,
        mode: options.mode,
        prevalence_rule: options.prevalence.name().to_string(),
        variables,
        population: population.len(),
        design_rows,
        dropped,
        rows,
    })
}

type LevelEffects = Vec<(Variable, String, Result<Effect>)>;

fn attach(rows: &mut [EffectRow], effects: LevelEffects, mut set: impl FnMut(&mut EffectRow, Effect)) {
    for (v, level, effect) in effects {
        if let Some(row) = rows.iter_mut().find(|r| r.variable == v && r.level == level) {
            match effect {
                Ok(e) => set(row, e),
                Err(e) => row.errors.push(e.to_string()),
            }
        }
    }
}

fn fit_effects(
    records: &[PredictionRecord],
    schema: &FactorSchema,
    variables: &[Variable],
    outcome: OutcomeKind,
    options: &RiskOptions<'_>,
) -> Result<(LevelEffects, usize, usize)> {
    let design = build_design(records, schema, variables, outcome, options.threshold)?;
    let fit = fit_mle_with(&design, &options.fit)?;
    let stats = wald(&fit)?;
    let mut out = Vec::new();
    for (col, w) in design.columns.iter().zip(&stats) {
        let Some(v) = col.variable else { continue };
        let spec = schema.require(v)?;
        let present: Vec<&PredictionRecord> = records
            .iter()
            .filter(|r| outcome.population(r) && r.level(v).is_some())
            .collect();
        let p0 = options
            .prevalence
            .p0(&present, spec, outcome, options.threshold)
            .ok();
        out.push((v, col.level.clone(), Effect::from_wald(w, p0)));
    }
    Ok((out, design.rows(), design.dropped))
}

fn rate_tests(
    population: &[&PredictionRecord],
    spec: &VariableSpec,
    outcome: OutcomeKind,
    test: &UnivariateTest,
    options: &RiskOptions<'_>,
    rows: &mut [EffectRow],
) {
    let metrics = default_metrics();
    let metric: &dyn Metric = metrics
        .get(outcome.rate_metric())
        .expect("rate metrics are registered");
    let present: Vec<&PredictionRecord> = population
        .iter()
        .copied()
        .filter(|r| r.level(spec.variable).is_some())
        .collect();
    let n = present.len();
    let family = test
        .family_size
        .unwrap_or_else(|| spec.non_control_levels().count());

    let distribution = |level: &str| -> Result<Vec<f64>> {
        let variable = spec.variable;
        let owned = level.to_string();
        let label = format!("{}/{}={}", outcome.short(), variable, level);
        let boot = BootstrapSpec::new(test.iterations, test.min_size.min(n).max(1), n, derive_seed(test.seed, &label))
            .with_filter(RecordFilter::new(label, move |r| r.level(variable) == Some(owned.as_str())));
        Ok(run_bootstrap(&present, &boot, metric, options.threshold, options.ci)?.defined_values())
    };

    let control = distribution(&spec.control);
    for row in rows.iter_mut().filter(|r| r.variable == spec.variable) {
        let result = control.as_ref().map_err(|e| format!("control bootstrap: {e}")).and_then(|c| {
            let level = distribution(&row.level).map_err(|e| e.to_string())?;
            welch_t(&level, c)
                .and_then(|t| t.with_bonferroni(family))
                .map_err(|e| e.to_string())
        });
        match result {
            Ok(t) => row.rate_test = Some(t),
            Err(e) => row.errors.push(format!("rate test: {e}")),
        }
    }
}
