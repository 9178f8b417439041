//! The full audit: overall and density-stratified subgroup metrics, pairwise
//! AUC tests, and the false negative / false positive risk tables.
//!
//! Every random draw derives from the root seed through a labelled sub-seed,
//! and the report is assembled in memory before anything touches disk.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{confusion, default_metrics, metric_set, roc_curve, Metric, MetricRegistry, MetricSet};
use crate::records::{parse_records_with, Dataset, FactorSchema, ParseOptions, PredictionRecord, Variable};
use crate::render::{self, Table};
use crate::resample::{
    default_ci_methods, run_bootstrap_many, BootstrapDistribution, BootstrapSpec, CiMethod, RecordFilter, Summary,
};
use crate::risk_model::{
    default_prevalence_rules, risk_table, FitOptions, OutcomeKind, RiskMode, RiskOptions, RiskTable, UnivariateTest,
};
use crate::seed::derive_seed;
use crate::stats_tests::{pair_count, welch_t, TestResult};

/// Overrides for one schema variable, keyed by its column name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariableOverride {
    pub levels: Option<Vec<String>>,
    pub control: Option<String>,
    pub labels: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditConfig {
    pub input: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub threshold: f64,
    pub iterations: usize,
    /// Sample-size range of the whole-set bootstrap; defaults to
    /// [min(overall_min_size, n), n].
    pub size_range: Option<(usize, usize)>,
    pub overall_min_size: usize,
    /// Lower sample size of each stratum's bootstrap (capped at the stratum size).
    pub stratum_min_size: usize,
    /// Lower sample size of the failure-rate bootstraps behind the risk tables.
    pub rate_test_min_size: usize,
    pub ci: String,
    pub prevalence: String,
    pub mode: RiskMode,
    pub overall_metrics: Vec<String>,
    pub subgroup_metrics: Vec<String>,
    /// Variable whose levels become the columns of the subgroup table.
    pub stratify_by: String,
    /// Bonferroni family for the rate tests; defaults to the non-control level count.
    pub rate_family_size: Option<usize>,
    /// Bonferroni family for pairwise AUC tests; defaults to the pair count.
    pub auc_family_size: Option<usize>,
    pub ridge: f64,
    pub lenient: bool,
    pub schema: BTreeMap<String, VariableOverride>,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            input: None,
            out: None,
            seed: 0,
            threshold: crate::records::DEFAULT_THRESHOLD,
            iterations: crate::resample::DEFAULT_ITERATIONS,
            size_range: None,
            overall_min_size: 1000,
            stratum_min_size: 500,
            rate_test_min_size: 1000,
            ci: "normal".into(),
            prevalence: "control-share".into(),
            mode: RiskMode::Multivariate,
            overall_metrics: ["accuracy", "auc", "recall", "precision", "f1"].map(String::from).to_vec(),
            subgroup_metrics: ["auc", "recall", "precision"].map(String::from).to_vec(),
            stratify_by: Variable::Density.column().into(),
            rate_family_size: None,
            auc_family_size: None,
            ridge: 0.0,
            lenient: false,
            schema: BTreeMap::new(),
        }
    }
}

fn config_error(key: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        message: message.into(),
    }
}

impl AuditConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| crate::error::toml_error(text, &e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml_str(&text)?;
        // Relative paths in a config file resolve against its directory.
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut config.input, &mut config.out].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }

    /// The mammography schema with this config's overrides applied.
    pub fn schema(&self) -> Result<FactorSchema> {
        let mut schema = FactorSchema::mammography();
        for (column, o) in &self.schema {
            let key = format!("schema.{column}");
            let v = Variable::from_column(column).ok_or_else(|| config_error(&key, "unknown variable"))?;
            let spec = schema.get_mut(v).expect("mammography schema declares every variable");
            if let Some(levels) = &o.levels {
                spec.levels = levels.clone();
                spec.labels = levels.clone();
            }
            if let Some(control) = &o.control {
                spec.control = control.clone();
            }
            if let Some(labels) = &o.labels {
                spec.labels = labels.clone();
            }
            spec.validate().map_err(|e| config_error(&key, e.to_string()))?;
        }
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations < 2 {
            return Err(config_error("iterations", "need at least 2 bootstrap iterations"));
        }
        if !(self.threshold.is_finite()) {
            return Err(config_error("threshold", "must be finite"));
        }
        if let Some((lo, hi)) = self.size_range {
            if lo < 1 || hi < lo {
                return Err(config_error("size_range", format!("invalid range [{lo}, {hi}]")));
            }
        }
        for (key, v) in [
            ("overall_min_size", self.overall_min_size),
            ("stratum_min_size", self.stratum_min_size),
            ("rate_test_min_size", self.rate_test_min_size),
        ] {
            if v < 1 {
                return Err(config_error(key, "must be at least 1"));
            }
        }
        for (key, v) in [("rate_family_size", self.rate_family_size), ("auc_family_size", self.auc_family_size)] {
            if v == Some(0) {
                return Err(config_error(key, "must be at least 1"));
            }
        }
        if self.ridge.is_nan() || self.ridge < 0.0 {
            return Err(config_error("ridge", "must be >= 0"));
        }
        let metrics = default_metrics();
        for (key, names) in [("overall_metrics", &self.overall_metrics), ("subgroup_metrics", &self.subgroup_metrics)] {
            for name in names {
                metrics.get(name).map_err(|e| config_error(key, e.to_string()))?;
            }
        }
        default_ci_methods().get(&self.ci).map_err(|e| config_error("ci", e.to_string()))?;
        default_prevalence_rules()
            .get(&self.prevalence)
            .map_err(|e| config_error("prevalence", e.to_string()))?;
        if Variable::from_column(&self.stratify_by).is_none() {
            return Err(config_error("stratify_by", "unknown variable"));
        }
        self.schema()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub seed: u64,
    pub input: Option<PathBuf>,
    pub records: usize,
    pub positives: usize,
    pub negatives: usize,
    pub excluded_rows: usize,
    pub threshold: f64,
    pub iterations: usize,
    pub overall_size_range: (usize, usize),
    pub stratum_min_size: usize,
    pub ci_method: String,
    pub prevalence_rule: String,
}

/// One metric over the whole set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverallRow {
    pub metric: String,
    pub point: Option<f64>,
    pub bootstrap: Option<Summary>,
    pub error: Option<String>,
}

/// One bootstrapped metric for one subgroup within one stratum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub metric: String,
    pub summary: Option<Summary>,
    pub defined: usize,
    pub error: Option<String>,
    #[serde(skip)]
    pub distribution: Option<BootstrapDistribution>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    /// None for the all-records column.
    pub level: Option<String>,
    pub label: String,
    pub records: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupRow {
    /// None for the all-records row.
    pub variable: Option<Variable>,
    pub level: Option<String>,
    pub label: String,
    /// Matching records per stratum, parallel to `SubgroupTable::strata`.
    pub counts: Vec<usize>,
    /// `cells[stratum][metric]`.
    pub cells: Vec<Vec<Cell>>,
}

impl SubgroupRow {
    fn key(&self) -> String {
        match (&self.variable, &self.level) {
            (Some(v), Some(l)) => format!("{v}={l}"),
            _ => "overall".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupTable {
    pub stratified_by: Variable,
    pub metrics: Vec<String>,
    pub strata: Vec<Stratum>,
    pub rows: Vec<SubgroupRow>,
}

/// Welch test between two subgroups' bootstrapped AUCs (all-records column).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseTest {
    pub variable: Variable,
    pub a: String,
    pub b: String,
    pub family_size: usize,
    pub result: Option<TestResult>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub header: ReportHeader,
    pub overall: Vec<OverallRow>,
    pub overall_counts: MetricSet,
    pub subgroups: SubgroupTable,
    pub auc_tests: Vec<PairwiseTest>,
    pub fn_risk: RiskTable,
    pub fp_risk: RiskTable,
    /// ROC curves of the all-records row and column of each subgroup, as CSV.
    #[serde(skip)]
    pub roc_files: Vec<(String, Vec<u8>)>,
}

/// Records of subgroup `level` of `v`. Lesion-level subgroups keep every
/// normal record so that AUC and precision stay defined.
fn subgroup_filter(v: Variable, level: &str) -> RecordFilter {
    let owned = level.to_string();
    let label = format!("{v}={level}");
    if v.is_lesion_level() {
        RecordFilter::new(label, move |r| !r.truth || r.level(v) == Some(owned.as_str()))
    } else {
        RecordFilter::new(label, move |r| r.level(v) == Some(owned.as_str()))
    }
}

fn failed_cell(metric: &dyn Metric, error: String) -> Cell {
    Cell {
        metric: metric.name().into(),
        summary: None,
        defined: 0,
        error: Some(error),
        distribution: None,
    }
}

fn cells(
    population: &[&PredictionRecord],
    spec: &BootstrapSpec,
    metrics: &[&dyn Metric],
    threshold: f64,
    ci: &dyn CiMethod,
) -> Result<Vec<Cell>> {
    if population.is_empty() {
        return Ok(metrics.iter().map(|m| failed_cell(*m, "stratum has no records".into())).collect());
    }
    let runs = match run_bootstrap_many(population, spec, metrics, threshold, ci) {
        Ok(runs) => runs,
        Err(e @ Error::Bootstrap(_)) => {
            return Ok(metrics.iter().map(|m| failed_cell(*m, e.to_string())).collect());
        }
        Err(e) => return Err(e),
    };
    Ok(metrics
        .iter()
        .zip(runs)
        .map(|(m, run)| match run {
            Ok(d) => Cell {
                metric: m.name().into(),
                summary: Some(d.summary),
                defined: d.defined,
                error: None,
                distribution: Some(d),
            },
            Err(e) => failed_cell(*m, e.to_string()),
        })
        .collect())
}

/// Runs the audit on records already in memory.
pub fn audit_dataset(dataset: &Dataset, schema: &FactorSchema, config: &AuditConfig) -> Result<AuditReport> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptySubset("no records to audit".into()));
    }
    let metrics: MetricRegistry = default_metrics();
    let cis = default_ci_methods();
    let ci = cis.get(&config.ci)?;
    let rules = default_prevalence_rules();
    let prevalence = rules.get(&config.prevalence)?;
    let threshold = config.threshold;
    let records: Vec<&PredictionRecord> = dataset.records.iter().collect();
    let n = records.len();

    // Whole-set metrics.
    let (lo, hi) = config.size_range.unwrap_or((config.overall_min_size.min(n), n));
    let overall_spec = BootstrapSpec::new(config.iterations, lo, hi, derive_seed(config.seed, "overall"));
    overall_spec.validate(n)?;
    let counts = confusion(records.iter().copied(), threshold)?;
    let overall_counts = metric_set(&counts, records.iter().copied());
    let overall_metrics: Vec<&dyn Metric> = config
        .overall_metrics
        .iter()
        .map(|m| metrics.get(m))
        .collect::<Result<_>>()?;
    let overall = overall_metrics
        .iter()
        .zip(cells(&records, &overall_spec, &overall_metrics, threshold, ci)?)
        .map(|(metric, c)| {
            Ok(OverallRow {
                metric: metric.name().into(),
                point: metric.evaluate(&records, threshold)?,
                bootstrap: c.summary,
                error: c.error,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    // Density-stratified subgroup table.
    let stratify = Variable::from_column(&config.stratify_by).expect("validated");
    let strat_spec = schema.require(stratify)?;
    let mut strata: Vec<(Stratum, Vec<&PredictionRecord>)> = strat_spec
        .levels
        .iter()
        .map(|level| {
            let members: Vec<&PredictionRecord> = records
                .iter()
                .copied()
                .filter(|r| r.level(stratify) == Some(level.as_str()))
                .collect();
            (
                Stratum {
                    level: Some(level.clone()),
                    label: strat_spec.label(level).to_string(),
                    records: members.len(),
                },
                members,
            )
        })
        .collect();
    strata.push((
        Stratum {
            level: None,
            label: "Overall".into(),
            records: n,
        },
        records.clone(),
    ));

    let mut row_defs: Vec<(Option<Variable>, Option<String>, String)> = vec![(None, None, "Overall".into())];
    for spec in &schema.variables {
        if spec.variable == stratify {
            continue;
        }
        let levels: Vec<&str> = if spec.variable.is_finding() {
            spec.non_control_levels().collect()
        } else {
            spec.levels.iter().map(String::as_str).collect()
        };
        for level in levels {
            row_defs.push((Some(spec.variable), Some(level.to_string()), spec.label(level).to_string()));
        }
    }

    let subgroup_metrics: Vec<&dyn Metric> = config
        .subgroup_metrics
        .iter()
        .map(|m| metrics.get(m))
        .collect::<Result<_>>()?;
    let rows: Vec<SubgroupRow> = row_defs
        .par_iter()
        .map(|(variable, level, label)| {
            let filter = match (variable, level) {
                (Some(v), Some(l)) => Some(subgroup_filter(*v, l)),
                _ => None,
            };
            let key = filter.as_ref().map_or("overall".to_string(), |f| f.label().to_string());
            let mut counts = Vec::new();
            let mut row_cells = Vec::new();
            for (stratum, members) in &strata {
                let m = members.len();
                counts.push(match &filter {
                    Some(f) => members.iter().filter(|r| f.matches(r)).count(),
                    None => m,
                });
                let stratum_key = stratum.level.as_deref().unwrap_or("all");
                let lo = if stratum.level.is_some() {
                    config.stratum_min_size
                } else {
                    config.overall_min_size
                };
                let seed = derive_seed(config.seed, &format!("cell/{key}/{stratify}={stratum_key}"));
                let mut spec = BootstrapSpec::new(config.iterations, lo.min(m).max(1), m.max(1), seed);
                if let Some(f) = &filter {
                    spec = spec.with_filter(f.clone());
                }
                row_cells.push(cells(members, &spec, &subgroup_metrics, threshold, ci)?);
            }
            Ok(SubgroupRow {
                variable: *variable,
                level: level.clone(),
                label: label.clone(),
                counts,
                cells: row_cells,
            })
        })
        .collect::<Result<_>>()?;

    // Pairwise AUC tests within each characteristic, on the all-records column.
    let auc_at = config.subgroup_metrics.iter().position(|m| m == "auc");
    let all_col = strata.len() - 1;
    let mut auc_tests = Vec::new();
    if let Some(ai) = auc_at {
        let mut groups: Vec<(Variable, Vec<(String, Option<&Cell>)>)> = Vec::new();
        for spec in &schema.variables {
            let members: Vec<(String, Option<&Cell>)> = if spec.variable == stratify {
                // The stratifying variable compares its own columns.
                let overall_row = &rows[0];
                strata[..all_col]
                    .iter()
                    .enumerate()
                    .map(|(s, (st, _))| (st.label.clone(), Some(&overall_row.cells[s][ai])))
                    .collect()
            } else {
                rows.iter()
                    .filter(|r| r.variable == Some(spec.variable))
                    .map(|r| (r.label.clone(), Some(&r.cells[all_col][ai])))
                    .collect()
            };
            if !spec.variable.is_finding() {
                groups.push((spec.variable, members));
            } else if let Some(last) = groups.last_mut().filter(|(v, _)| v.is_finding()) {
                last.1.extend(members);
            } else {
                groups.push((spec.variable, members));
            }
        }
        for (variable, members) in groups {
            let m = config.auc_family_size.unwrap_or_else(|| pair_count(members.len()).max(1));
            for i in 0..members.len() {
                for j in i + 1..members.len() {
                    let (a, ca) = &members[i];
                    let (b, cb) = &members[j];
                    let values = |c: &Option<&Cell>| -> std::result::Result<Vec<f64>, String> {
                        c.and_then(|c| c.distribution.as_ref())
                            .map(|d| d.defined_values())
                            .ok_or_else(|| "bootstrap unavailable".to_string())
                    };
                    let result = values(ca).and_then(|va| {
                        let vb = values(cb)?;
                        welch_t(&va, &vb)
                            .and_then(|t| t.with_bonferroni(m))
                            .map_err(|e| e.to_string())
                    });
                    let (result, error) = match result {
                        Ok(t) => (Some(t), None),
                        Err(e) => (None, Some(e)),
                    };
                    auc_tests.push(PairwiseTest {
                        variable,
                        a: a.clone(),
                        b: b.clone(),
                        family_size: m,
                        result,
                        error,
                    });
                }
            }
        }
    }

    // Risk tables.
    let fit = FitOptions {
        ridge: config.ridge,
        ..FitOptions::default()
    };
    let variables: Vec<Variable> = schema.variables.iter().map(|s| s.variable).collect();
    let risk = |outcome: OutcomeKind| {
        let options = RiskOptions {
            threshold,
            mode: config.mode,
            prevalence,
            fit,
            univariate_test: Some(UnivariateTest {
                iterations: config.iterations,
                min_size: config.rate_test_min_size,
                seed: config.seed,
                family_size: config.rate_family_size,
            }),
            ci,
        };
        risk_table(&dataset.records, schema, &variables, outcome, &options)
    };
    let fn_risk = risk(OutcomeKind::FalseNegative)?;
    let fp_risk = risk(OutcomeKind::FalsePositive)?;

    // ROC curves: the all-records row across strata and each subgroup overall.
    let mut roc_files = Vec::new();
    let mut add_roc = |name: String, subset: Vec<&PredictionRecord>| {
        if let Ok(curve) = roc_curve(subset) {
            let mut buf = Vec::new();
            curve.write_csv(&mut buf).expect("in-memory write");
            roc_files.push((name, buf));
        }
    };
    for (stratum, members) in &strata {
        let key = stratum.level.as_deref().map_or("overall".to_string(), |l| format!("{stratify}={l}"));
        add_roc(render::slug(&key), members.clone());
    }
    for row in rows.iter().skip(1) {
        let (Some(v), Some(l)) = (row.variable, row.level.as_deref()) else { continue };
        let f = subgroup_filter(v, l);
        add_roc(render::slug(&row.key()), records.iter().copied().filter(|r| f.matches(r)).collect());
    }

    Ok(AuditReport {
        header: ReportHeader {
            seed: config.seed,
            input: dataset.provenance.source.clone(),
            records: n,
            positives: dataset.positives().count(),
            negatives: dataset.negatives().count(),
            excluded_rows: dataset.excluded_rows(),
            threshold,
            iterations: config.iterations,
            overall_size_range: (lo, hi),
            stratum_min_size: config.stratum_min_size,
            ci_method: ci.name().into(),
            prevalence_rule: prevalence.name().into(),
        },
        overall,
        overall_counts,
        subgroups: SubgroupTable {
            stratified_by: stratify,
            metrics: config.subgroup_metrics.clone(),
            strata: strata.into_iter().map(|(s, _)| s).collect(),
            rows,
        },
        auc_tests,
        fn_risk,
        fp_risk,
        roc_files,
    })
}

/// Parses `config.input` and audits it.
pub fn cmd_audit(config: &AuditConfig) -> Result<AuditReport> {
    config.validate()?;
    let input = config
        .input
        .as_deref()
        .ok_or_else(|| config_error("input", "no input file given"))?;
    let schema = config.schema()?;
    let dataset = parse_records_with(input, &schema, ParseOptions { lenient: config.lenient })?;
    audit_dataset(&dataset, &schema, config)
}

impl AuditReport {
    pub fn overall_table(&self) -> Table {
        let mut t = Table::new(["Metric", "Point", "Bootstrap mean", "CI low", "CI high", "Note"]);
        for row in &self.overall {
            let s = row.bootstrap.as_ref();
            t.push([
                row.metric.clone(),
                render::fixed(row.point, 3),
                render::fixed(s.map(|s| s.mean), 3),
                render::fixed(s.map(|s| s.ci_low), 3),
                render::fixed(s.map(|s| s.ci_high), 3),
                row.error.clone().unwrap_or_default(),
            ]);
        }
        t
    }

    /// Text layout: one line per (subgroup, metric), strata as columns.
    pub fn subgroup_table(&self) -> Table {
        let sub = &self.subgroups;
        let mut header = vec!["Subgroup".to_string(), "Metric".to_string()];
        header.extend(sub.strata.iter().map(|s| s.label.clone()));
        let mut t = Table::new(header);
        let mut last_group = String::new();
        for row in &sub.rows {
            if let Some(v) = row.variable {
                let title = group_title(v);
                if title != last_group {
                    t.push([title.clone()]);
                    last_group = title;
                }
            }
            for (mi, metric) in sub.metrics.iter().enumerate() {
                let mut line = vec![
                    if mi == 0 { row.label.clone() } else { String::new() },
                    format!("{}:", metric_title(metric)),
                ];
                for cells in &row.cells {
                    line.push(cells[mi].summary.as_ref().map(render::mean_pm).unwrap_or_default());
                }
                t.push(line);
            }
        }
        let mut total = vec!["Total Count".to_string(), String::new()];
        for s in &sub.strata {
            let pct = if self.header.records > 0 {
                100.0 * s.records as f64 / self.header.records as f64
            } else {
                0.0
            };
            total.push(format!("{} ({pct:.1}%)", render::count(s.records)));
        }
        t.push(total);
        t
    }

    /// Machine-readable long form of the subgroup table.
    pub fn subgroup_csv(&self) -> Table {
        let mut t = Table::new([
            "variable", "level", "label", "stratum", "metric", "records", "mean", "sd", "ci_low", "ci_high", "defined",
            "error",
        ]);
        let sub = &self.subgroups;
        for row in &sub.rows {
            for (si, stratum) in sub.strata.iter().enumerate() {
                for c in &row.cells[si] {
                    let s = c.summary.as_ref();
                    t.push([
                        row.variable.map(|v| v.column().to_string()).unwrap_or_default(),
                        row.level.clone().unwrap_or_default(),
                        row.label.clone(),
                        stratum.label.clone(),
                        c.metric.clone(),
                        row.counts[si].to_string(),
                        render::exact(s.map(|s| s.mean)),
                        render::exact(s.map(|s| s.sd)),
                        render::exact(s.map(|s| s.ci_low)),
                        render::exact(s.map(|s| s.ci_high)),
                        c.defined.to_string(),
                        c.error.clone().unwrap_or_default(),
                    ]);
                }
            }
        }
        t
    }

    pub fn pairwise_table(&self) -> Table {
        let mut t = Table::new(["Variable", "A", "B", "t", "df", "p", "Adjusted p", "m", "Note"]);
        for test in &self.auc_tests {
            let r = test.result.as_ref();
            t.push([
                group_title(test.variable),
                test.a.clone(),
                test.b.clone(),
                render::fixed(r.map(|r| r.t), 3),
                render::fixed(r.map(|r| r.df), 1),
                r.map(|r| render::p_value(r.p, false)).unwrap_or_default(),
                r.map(|r| render::p_value(r.effective_p(), r.significant)).unwrap_or_default(),
                test.family_size.to_string(),
                test.error.clone().unwrap_or_default(),
            ]);
        }
        t
    }

    pub fn render_text(&self) -> String {
        let h = &self.header;
        let mut out = String::new();
        out.push_str("FAILURE AUDIT REPORT\n");
        out.push_str(&format!("seed: {}\n", h.seed));
        if let Some(input) = &h.input {
            out.push_str(&format!("input: {}\n", input.display()));
        }
        out.push_str(&format!(
            "records: {} ({} abnormal, {} normal; {} excluded)\n",
            h.records, h.positives, h.negatives, h.excluded_rows
        ));
        out.push_str(&format!(
            "threshold: {}  iterations: {}  size range: [{}, {}]  stratum min size: {}  ci: {}  P0 rule: {}\n\n",
            h.threshold,
            h.iterations,
            h.overall_size_range.0,
            h.overall_size_range.1,
            h.stratum_min_size,
            h.ci_method,
            h.prevalence_rule
        ));
        let sections = [
            ("Overall performance", self.overall_table()),
            (
                &*format!("Subgroup performance stratified by {}", self.subgroups.stratified_by),
                self.subgroup_table(),
            ),
            ("Pairwise AUC comparisons (Welch, Bonferroni)", self.pairwise_table()),
            ("False negative risk", risk_text_table(&self.fn_risk)),
            ("False positive risk", risk_text_table(&self.fp_risk)),
        ];
        for (title, table) in sections {
            out.push_str(title);
            out.push('\n');
            out.push_str(&table.to_text());
            out.push('\n');
        }
        for (title, table) in [("False negative", &self.fn_risk), ("False positive", &self.fp_risk)] {
            out.push_str(&format!(
                "{title} model: {} records{}\n",
                table.population,
                table
                    .design_rows
                    .map(|r| format!(", {r} complete cases in the joint fit"))
                    .unwrap_or_default()
            ));
            for row in table.rows.iter().filter(|r| !r.errors.is_empty()) {
                out.push_str(&format!("  {}: {}\n", row.label, row.errors.join("; ")));
            }
        }
        out
    }

    /// Every output file, relative to the output directory, in write order.
    pub fn artifacts(&self) -> Result<Vec<(PathBuf, Vec<u8>)>> {
        let mut files = vec![
            (PathBuf::from("report.txt"), self.render_text().into_bytes()),
            (PathBuf::from("report.json"), {
                let mut j = serde_json::to_vec_pretty(self).map_err(|e| Error::Malformed {
                    row: 0,
                    message: format!("json rendering: {e}"),
                })?;
                j.push(b'\n');
                j
            }),
            (PathBuf::from("overall.csv"), self.overall_table().to_csv()?),
            (PathBuf::from("subgroups.csv"), self.subgroup_csv().to_csv()?),
            (PathBuf::from("auc_pairwise.csv"), self.pairwise_table().to_csv()?),
            (PathBuf::from("fn_risk.csv"), risk_csv_table(&self.fn_risk).to_csv()?),
            (PathBuf::from("fp_risk.csv"), risk_csv_table(&self.fp_risk).to_csv()?),
        ];
        for (name, bytes) in &self.roc_files {
            files.push((Path::new("roc").join(format!("{name}.csv")), bytes.clone()));
        }
        let sub = &self.subgroups;
        for row in &sub.rows {
            for (si, stratum) in sub.strata.iter().enumerate() {
                let stratum_key = stratum
                    .level
                    .as_deref()
                    .map_or("all".to_string(), |l| format!("{}={l}", sub.stratified_by));
                for c in &row.cells[si] {
                    if let Some(d) = &c.distribution {
                        let mut buf = Vec::new();
                        d.write_column(&mut buf).expect("in-memory write");
                        let name = render::slug(&format!("{}__{stratum_key}__{}", row.key(), c.metric));
                        files.push((Path::new("bootstrap").join(format!("{name}.csv")), buf));
                    }
                }
            }
        }
        Ok(files)
    }

    /// Writes every artifact under `dir`, creating it as needed.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let files = self.artifacts()?;
        let mut written = Vec::new();
        for (rel, bytes) in files {
            let path = dir.join(rel);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
        Ok(written)
    }
}

fn group_title(v: Variable) -> String {
    match v {
        Variable::Race => "Race",
        Variable::AgeGroup => "Age Group",
        Variable::Density => "BI-RADS Density",
        Variable::Pathology => "Pathology",
        _ => "Image Findings",
    }
    .to_string()
}

fn metric_title(name: &str) -> String {
    match name {
        "auc" => "AUC".into(),
        "f1" => "F1".into(),
        "fnr" => "FNR".into(),
        "fpr" => "FPR".into(),
        other => {
            let mut c = other.chars();
            c.next()
                .map(|f| f.to_uppercase().collect::<String>() + c.as_str())
                .unwrap_or_default()
        }
    }
}

/// Wide risk table: one row per non-control level.
pub fn risk_text_table(table: &RiskTable) -> Table {
    let mut t = Table::new([
        "Variables",
        "OR",
        "RR",
        "Univariate p-value",
        "Multivariate p-value",
        "Number of Patches",
        "Control Group",
    ]);
    for row in &table.rows {
        let e = row.primary();
        let significant = e.is_some_and(|e| e.p_value < crate::stats_tests::ALPHA);
        t.push([
            row.label.clone(),
            render::fixed(e.map(|e| e.odds_ratio), 3),
            render::fixed(e.and_then(|e| e.risk_ratio), 3),
            row.rate_test
                .as_ref()
                .map(|r| render::p_value(r.effective_p(), r.significant))
                .unwrap_or_default(),
            e.map(|e| render::p_value(e.p_value, significant)).unwrap_or_default(),
            render::count(row.count),
            row.control_label.clone(),
        ]);
    }
    t
}

pub fn risk_csv_table(table: &RiskTable) -> Table {
    let mut t = Table::new([
        "variable",
        "level",
        "label",
        "control",
        "control_label",
        "count",
        "p0",
        "or",
        "or_ci_low",
        "or_ci_high",
        "rr",
        "rr_ci_low",
        "rr_ci_high",
        "wald_p",
        "univariate_or",
        "univariate_p",
        "rate_t",
        "rate_df",
        "rate_p",
        "rate_adjusted_p",
        "errors",
    ]);
    for row in &table.rows {
        let m = row.multivariate.as_ref();
        let u = row.univariate.as_ref();
        let r = row.rate_test.as_ref();
        t.push([
            row.variable.column().to_string(),
            row.level.clone(),
            row.label.clone(),
            row.control.clone(),
            row.control_label.clone(),
            row.count.to_string(),
            render::exact(row.p0),
            render::exact(m.map(|e| e.odds_ratio)),
            render::exact(m.map(|e| e.or_ci.0)),
            render::exact(m.map(|e| e.or_ci.1)),
            render::exact(m.and_then(|e| e.risk_ratio)),
            render::exact(m.and_then(|e| e.rr_ci).map(|c| c.0)),
            render::exact(m.and_then(|e| e.rr_ci).map(|c| c.1)),
            render::exact(m.map(|e| e.p_value)),
            render::exact(u.map(|e| e.odds_ratio)),
            render::exact(u.map(|e| e.p_value)),
            render::exact(r.map(|r| r.t)),
            render::exact(r.map(|r| r.df)),
            render::exact(r.map(|r| r.p)),
            render::exact(r.and_then(|r| r.adjusted_p)),
            row.errors.join("; "),
        ]);
    }
    t
}
