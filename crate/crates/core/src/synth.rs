//! Synthetic prediction cohorts with a known logistic failure model.
//!
//! Record `i` draws from ChaCha stream `i` under the configured seed, so the
//! cohort is identical however the work is split across threads.

use std::collections::BTreeMap;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::records::{Dataset, FactorSchema, PredictionRecord, Provenance, Variable};
use crate::risk_model::OutcomeKind;

const SUM_TOLERANCE: f64 = 1e-9;

/// Level name to probability.
pub type Distribution1 = BTreeMap<String, f64>;

/// Intercept plus per-level coefficients keyed by variable column, then level.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FailureModel {
    pub intercept: f64,
    #[serde(flatten)]
    pub coefficients: BTreeMap<String, BTreeMap<String, f64>>,
}

impl FailureModel {
    fn coefficient(&self, v: Variable, level: &str) -> f64 {
        self.coefficients
            .get(v.column())
            .and_then(|m| m.get(level))
            .copied()
            .unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub cohort_size: usize,
    pub positive_fraction: f64,
    /// Scores sit in [0.5, 0.5 + margin] for predicted positives and
    /// [0.5 - margin, 0.5) for predicted negatives.
    #[serde(default = "default_margin")]
    pub score_margin: f64,
    pub race: Distribution1,
    /// Density given race; every race level needs a row.
    pub density_given_race: BTreeMap<String, Distribution1>,
    pub age_group: Distribution1,
    /// Pathology among positives.
    pub pathology: Distribution1,
    /// Per-finding presence probability among positives, keyed by column.
    #[serde(default)]
    pub findings: BTreeMap<String, f64>,
    /// P(false negative) model over positives.
    pub fn_model: FailureModel,
    /// P(false positive) model over negatives.
    pub fp_model: FailureModel,
}

fn default_margin() -> f64 {
    0.4
}

fn config_error(key: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        message: message.into(),
    }
}

impl SynthConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: SynthConfig = toml::from_str(text).map_err(|e| crate::error::toml_error(text, &e))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let schema = FactorSchema::mammography();
        if self.cohort_size < 1 {
            return Err(config_error("cohort_size", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return Err(config_error("positive_fraction", "must lie in [0, 1]"));
        }
        if !(self.score_margin > 0.0 && self.score_margin <= 0.5) {
            return Err(config_error("score_margin", "must lie in (0, 0.5]"));
        }
        check_distribution("race", &self.race, &schema, Variable::Race)?;
        check_distribution("age_group", &self.age_group, &schema, Variable::AgeGroup)?;
        check_distribution("pathology", &self.pathology, &schema, Variable::Pathology)?;
        for race in self.race.keys() {
            let row = self.density_given_race.get(race).ok_or_else(|| {
                config_error(format!("density_given_race.{race}"), "missing row for race level")
            })?;
            check_distribution(
                &format!("density_given_race.{race}"),
                row,
                &schema,
                Variable::Density,
            )?;
        }
        for race in self.density_given_race.keys() {
            if !self.race.contains_key(race) {
                return Err(config_error(
                    format!("density_given_race.{race}"),
                    "race level not present in `race`",
                ));
            }
        }
        for (column, p) in &self.findings {
            let key = format!("findings.{column}");
            if !Variable::from_column(column).is_some_and(Variable::is_finding) {
                return Err(config_error(key, "not a finding column"));
            }
            if !(0.0..=1.0).contains(p) {
                return Err(config_error(key, "probability must lie in [0, 1]"));
            }
        }
        check_model("fn_model", &self.fn_model, &schema, OutcomeKind::FalseNegative)?;
        check_model("fp_model", &self.fp_model, &schema, OutcomeKind::FalsePositive)?;
        Ok(())
    }
}

fn check_distribution(
    key: &str,
    dist: &Distribution1,
    schema: &FactorSchema,
    v: Variable,
) -> Result<()> {
    let spec = schema.require(v)?;
    if dist.is_empty() {
        return Err(config_error(key, "distribution is empty"));
    }
    for (level, p) in dist {
        if !spec.contains(level) {
            return Err(config_error(
                format!("{key}.{level}"),
                format!("unknown level; expected one of {:?}", spec.levels),
            ));
        }
        if !(p.is_finite() && *p >= 0.0) {
            return Err(config_error(format!("{key}.{level}"), "probability must be >= 0"));
        }
    }
    let total: f64 = dist.values().sum();
    if (total - 1.0).abs() > SUM_TOLERANCE {
        return Err(config_error(key, format!("probabilities sum to {total}, not 1")));
    }
    Ok(())
}

fn check_model(
    key: &str,
    model: &FailureModel,
    schema: &FactorSchema,
    outcome: OutcomeKind,
) -> Result<()> {
    if !model.intercept.is_finite() {
        return Err(config_error(format!("{key}.intercept"), "must be finite"));
    }
    for (column, levels) in &model.coefficients {
        let at = format!("{key}.{column}");
        let v = Variable::from_column(column)
            .ok_or_else(|| config_error(&at, "unknown variable"))?;
        if !outcome.applies_to(v) {
            return Err(config_error(
                &at,
                format!("variable does not apply to {} records", outcome.population_label()),
            ));
        }
        let spec = schema.require(v)?;
        for (level, beta) in levels {
            if !spec.contains(level) {
                return Err(config_error(
                    format!("{at}.{level}"),
                    format!("unknown level; expected one of {:?}", spec.levels),
                ));
            }
            if !beta.is_finite() {
                return Err(config_error(format!("{at}.{level}"), "must be finite"));
            }
            if *level == spec.control && *beta != 0.0 {
                return Err(config_error(
                    format!("{at}.{level}"),
                    "control level coefficient must be 0",
                ));
            }
        }
    }
    Ok(())
}

struct Sampler {
    levels: Vec<String>,
    index: WeightedIndex<f64>,
}

impl Sampler {
    fn new(dist: &Distribution1) -> Self {
        Self {
            levels: dist.keys().cloned().collect(),
            index: WeightedIndex::new(dist.values().copied()).expect("validated distribution"),
        }
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> &str {
        &self.levels[self.index.sample(rng)]
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn linear_predictor(model: &FailureModel, record: &PredictionRecord) -> f64 {
    Variable::ALL.iter().fold(model.intercept, |acc, &v| match record.level(v) {
        Some(level) => acc + model.coefficient(v, level),
        None => acc,
    })
}

/// Draws `config.cohort_size` records. Every record gets its own patient.
pub fn generate(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let race = Sampler::new(&config.race);
    let age = Sampler::new(&config.age_group);
    let pathology = Sampler::new(&config.pathology);
    let density: BTreeMap<&str, Sampler> = config
        .density_given_race
        .iter()
        .map(|(k, d)| (k.as_str(), Sampler::new(d)))
        .collect();
    let width = config.cohort_size.to_string().len().max(6);

    let records: Vec<PredictionRecord> = (0..config.cohort_size)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(i as u64);
            let truth = rng.gen_bool(config.positive_fraction);
            let mut r = PredictionRecord::new(
                format!("S{i:0width$}"),
                format!("SP{i:0width$}"),
                truth,
            );
            let race_level = race.draw(&mut rng);
            r.race = Some(race_level.to_string());
            r.density = Some(density[race_level].draw(&mut rng).to_string());
            r.age_group = Some(age.draw(&mut rng).to_string());
            if truth {
                r.pathology = Some(pathology.draw(&mut rng).to_string());
                for v in Variable::FINDINGS {
                    let p = config.findings.get(v.column()).copied().unwrap_or(0.0);
                    r.set_level(v, Some(if rng.gen_bool(p) { "1" } else { "0" }));
                }
            }
            let model = if truth { &config.fn_model } else { &config.fp_model };
            let failed = rng.gen_bool(logistic(linear_predictor(model, &r)));
            let predicted = truth != failed;
            let u: f64 = rng.gen();
            r.score = Some(if predicted {
                0.5 + config.score_margin * u
            } else {
                0.5 - config.score_margin * (1.0 - u)
            });
            r.predicted = Some(predicted);
            r
        })
        .collect();

    let mut dataset = Dataset::from_records(records);
    dataset.provenance = Provenance {
        source: None,
        raw_rows: config.cohort_size,
        rejected: Vec::new(),
    };
    Ok(dataset)
}

/// The true odds ratio exp(beta) of one non-control level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueEffect {
    pub outcome: OutcomeKind,
    pub variable: Variable,
    pub level: String,
    pub odds_ratio: f64,
}

/// exp(beta) for every non-control level of every variable the outcome
/// applies to, in schema order.
pub fn theoretical_effects(config: &SynthConfig, outcome: OutcomeKind) -> Vec<TrueEffect> {
    let model = match outcome {
        OutcomeKind::FalseNegative => &config.fn_model,
        OutcomeKind::FalsePositive => &config.fp_model,
    };
    let schema = FactorSchema::mammography();
    schema
        .variables
        .iter()
        .filter(|s| outcome.applies_to(s.variable))
        .flat_map(|s| {
            s.non_control_levels().map(move |level| TrueEffect {
                outcome,
                variable: s.variable,
                level: level.to_string(),
                odds_ratio: model.coefficient(s.variable, level).exp(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const NULL_CONFIG: &str = r#"
        seed = 3
        cohort_size = 100000
        positive_fraction = 0.5
        race = { White = 0.5, Black = 0.5 }
        age_group = { "<50" = 1.0 }
        pathology = { NeverBiopsied = 1.0 }
        [density_given_race]
        White = { A = 0.5, B = 0.5 }
        Black = { A = 0.5, B = 0.5 }
        [fn_model]
        intercept = -2.1972245773362196
        [fp_model]
        intercept = -2.1972245773362196
    "#;

    #[test]
    fn null_model_rate() {
        let config = SynthConfig::from_toml_str(NULL_CONFIG).unwrap();
        let data = generate(&config).unwrap();
        let pos: Vec<_> = data.positives().collect();
        let fn_rate =
            pos.iter().filter(|r| r.predicted == Some(false)).count() as f64 / pos.len() as f64;
        assert!((fn_rate - 0.1).abs() < 0.01, "{fn_rate}");
        assert!(data.records.iter().all(|r| {
            let s = r.score.unwrap();
            (s >= 0.5) == r.predicted.unwrap()
        }));
    }

    #[test]
    fn deterministic() {
        let mut config = SynthConfig::from_toml_str(NULL_CONFIG).unwrap();
        config.cohort_size = 2000;
        assert_eq!(generate(&config).unwrap().records, generate(&config).unwrap().records);
        config.seed += 1;
        let other = generate(&config).unwrap();
        config.seed -= 1;
        assert_ne!(generate(&config).unwrap().records, other.records);
    }

    #[test]
    fn errors_name_the_key() {
        let bad = NULL_CONFIG.replace("White = 0.5, Black = 0.5", "White = 0.5, Black = 0.4");
        match SynthConfig::from_toml_str(&bad) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "race"),
            other => panic!("{other:?}"),
        }
        let bad = NULL_CONFIG.replace("cohort_size = 100000\n", "");
        match SynthConfig::from_toml_str(&bad) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "cohort_size"),
            other => panic!("{other:?}"),
        }
        let bad = NULL_CONFIG.replace("[fp_model]", "[fp_model]\nmass = { \"1\" = 0.5 }");
        match SynthConfig::from_toml_str(&bad) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "fp_model.mass"),
            other => panic!("{other:?}"),
        }
        let bad = NULL_CONFIG.replace("A = 0.5, B = 0.5 }\n        Black", "A = 0.5, E = 0.5 }\n        Black");
        match SynthConfig::from_toml_str(&bad) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "density_given_race.White.E"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn effects_exponentiate() {
        let text = NULL_CONFIG.replace(
            "[fp_model]",
            "density = { C = 0.6931471805599453 }\n[fp_model]",
        );
        let config = SynthConfig::from_toml_str(&text).unwrap();
        let effects = theoretical_effects(&config, OutcomeKind::FalseNegative);
        assert_eq!(effects.len(), 14);
        for e in &effects {
            let expected = if e.variable == Variable::Density && e.level == "C" { 2.0 } else { 1.0 };
            assert!((e.odds_ratio - expected).abs() < 1e-12);
        }
        assert_eq!(theoretical_effects(&config, OutcomeKind::FalsePositive).len(), 8);
    }
}
