//! Variable-size bootstrap over record subsets.
//!
//! Iteration `i` draws from its own ChaCha stream (`seed`, stream `i`), so a
//! distribution depends only on the inputs and never on thread scheduling.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Metric;
use crate::records::PredictionRecord;
use crate::registry::{Named, Registry};

pub const DEFAULT_ITERATIONS: usize = 200;
pub const Z_95: f64 = 1.959_963_984_540_054;

/// Predicate applied to every resample before the metric is evaluated.
#[derive(Clone)]
pub struct RecordFilter {
    label: String,
    predicate: Arc<dyn Fn(&PredictionRecord) -> bool + Send + Sync>,
}

impl RecordFilter {
    pub fn new(
        label: impl Into<String>,
        predicate: impl Fn(&PredictionRecord) -> bool + Send + Sync + 'static,
    ) -> Self {
        Self {
            label: label.into(),
            predicate: Arc::new(predicate),
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn matches(&self, record: &PredictionRecord) -> bool {
        (self.predicate)(record)
    }
}

impl fmt::Debug for RecordFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("RecordFilter").field(&self.label).finish()
    }
}

#[derive(Debug, Clone)]
pub struct BootstrapSpec {
    pub iterations: usize,
    /// Inclusive range of per-iteration sample sizes.
    pub size_range: (usize, usize),
    pub seed: u64,
    pub filter: Option<RecordFilter>,
}

impl BootstrapSpec {
    pub fn new(iterations: usize, lo: usize, hi: usize, seed: u64) -> Self {
        Self {
            iterations,
            size_range: (lo, hi),
            seed,
            filter: None,
        }
    }

    /// Samples of exactly the population size, the classic bootstrap.
    pub fn full_size(iterations: usize, n: usize, seed: u64) -> Self {
        Self::new(iterations, n, n, seed)
    }

    pub fn with_filter(mut self, filter: RecordFilter) -> Self {
        self.filter = Some(filter);
        self
    }

    pub fn validate(&self, population: usize) -> Result<()> {
        let (lo, hi) = self.size_range;
        if self.iterations == 0 {
            return Err(Error::Bootstrap("iterations must be positive".into()));
        }
        if lo < 1 || hi < lo {
            return Err(Error::Bootstrap(format!("invalid size range [{lo}, {hi}]")));
        }
        if population < lo {
            return Err(Error::Bootstrap(format!(
                "subset of {population} records is smaller than the minimum sample size {lo}"
            )));
        }
        if hi > population {
            return Err(Error::Bootstrap(format!(
                "maximum sample size {hi} exceeds the subset size {population}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl Summary {
    pub fn half_width(&self) -> f64 {
        0.5 * (self.ci_high - self.ci_low)
    }

    pub fn covers(&self, value: f64) -> bool {
        self.ci_low <= value && value <= self.ci_high
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapDistribution {
    pub metric: String,
    /// One entry per iteration; `None` where the metric was undefined.
    pub values: Vec<Option<f64>>,
    pub sizes: Vec<usize>,
    pub defined: usize,
    pub summary: Summary,
    pub ci_method: String,
}

impl BootstrapDistribution {
    pub fn defined_values(&self) -> Vec<f64> {
        self.values.iter().flatten().copied().collect()
    }

    /// One value per line; undefined iterations are written as `NA`.
    pub fn write_column<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{}", self.metric)?;
        for v in &self.values {
            match v {
                Some(v) => writeln!(out, "{v}")?,
                None => writeln!(out, "NA")?,
            }
        }
        Ok(())
    }
}

/// Interval construction over bootstrap replicates.
pub trait CiMethod: Named + Send + Sync {
    fn interval(&self, values: &[f64], mean: f64, sd: f64) -> (f64, f64);
}

/// mean +/- 1.96 sd, unclamped.
pub struct NormalCi;

impl Named for NormalCi {
    fn name(&self) -> &'static str {
        "normal"
    }
}

impl CiMethod for NormalCi {
    fn interval(&self, _values: &[f64], mean: f64, sd: f64) -> (f64, f64) {
        (mean - Z_95 * sd, mean + Z_95 * sd)
    }
}

/// 2.5% and 97.5% quantiles with linear interpolation between order
/// statistics.
pub struct PercentileCi;

impl Named for PercentileCi {
    fn name(&self) -> &'static str {
        "percentile"
    }
}

impl CiMethod for PercentileCi {
    fn interval(&self, values: &[f64], _mean: f64, _sd: f64) -> (f64, f64) {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        (quantile(&sorted, 0.025), quantile(&sorted, 0.975))
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub type CiRegistry = Registry<dyn CiMethod>;

pub fn default_ci_methods() -> CiRegistry {
    let mut reg = CiRegistry::new("ci method");
    reg.register(Box::new(NormalCi)).register(Box::new(PercentileCi));
    reg
}

/// Mean, sample standard deviation and interval of `values`.
pub fn summarize(values: &[f64], method: &dyn CiMethod) -> Result<Summary> {
    if values.len() < 2 {
        return Err(Error::Bootstrap(format!(
            "need at least 2 defined values to summarize, got {}",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    let (ci_low, ci_high) = method.interval(values, mean, sd);
    Ok(Summary {
        mean,
        sd,
        ci_low,
        ci_high,
    })
}

fn draw<'a>(
    population: &[&'a PredictionRecord],
    keep: Option<&[bool]>,
    spec: &BootstrapSpec,
    iteration: usize,
) -> (usize, Vec<&'a PredictionRecord>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(iteration as u64);
    let (lo, hi) = spec.size_range;
    let n = rng.gen_range(lo..=hi);
    let mut sample = Vec::with_capacity(n);
    for _ in 0..n {
        let i = rng.gen_range(0..population.len());
        if keep.is_none_or(|k| k[i]) {
            sample.push(population[i]);
        }
    }
    (n, sample)
}

/// Runs `spec.iterations` resamples of `population`, evaluating `metric`
/// on each (after the optional filter).
pub fn run_bootstrap(
    population: &[&PredictionRecord],
    spec: &BootstrapSpec,
    metric: &dyn Metric,
    threshold: f64,
    ci: &dyn CiMethod,
) -> Result<BootstrapDistribution> {
    run_bootstrap_many(population, spec, &[metric], threshold, ci)?
        .pop()
        .expect("one metric")
}

/// Like [`run_bootstrap`] for several metrics evaluated on the same
/// resamples. The outer error covers the spec and the records; each metric
/// then succeeds or fails on its own.
pub fn run_bootstrap_many(
    population: &[&PredictionRecord],
    spec: &BootstrapSpec,
    metrics: &[&dyn Metric],
    threshold: f64,
    ci: &dyn CiMethod,
) -> Result<Vec<Result<BootstrapDistribution>>> {
    spec.validate(population.len())?;
    let keep: Option<Vec<bool>> = spec
        .filter
        .as_ref()
        .map(|f| population.iter().map(|r| f.matches(r)).collect());
    let results: Vec<(usize, Vec<Option<f64>>)> = (0..spec.iterations)
        .into_par_iter()
        .map(|i| {
            let (n, sample) = draw(population, keep.as_deref(), spec, i);
            let values = metrics
                .iter()
                .map(|m| m.evaluate(&sample, threshold))
                .collect::<Result<Vec<_>>>()?;
            Ok((n, values))
        })
        .collect::<Result<_>>()?;

    let sizes: Vec<usize> = results.iter().map(|(n, _)| *n).collect();
    Ok(metrics
        .iter()
        .enumerate()
        .map(|(k, metric)| {
            let values: Vec<Option<f64>> = results.iter().map(|(_, v)| v[k]).collect();
            let defined: Vec<f64> = values.iter().flatten().copied().collect();
            if 2 * defined.len() < spec.iterations {
                return Err(Error::Bootstrap(format!(
                    "metric `{}`{} undefined in {} of {} iterations",
                    metric.name(),
                    spec.filter
                        .as_ref()
                        .map(|f| format!(" on `{}`", f.label()))
                        .unwrap_or_default(),
                    spec.iterations - defined.len(),
                    spec.iterations
                )));
            }
            let summary = summarize(&defined, ci)?;
            Ok(BootstrapDistribution {
                metric: metric.name().to_string(),
                defined: defined.len(),
                values,
                sizes: sizes.clone(),
                summary,
                ci_method: ci.name().to_string(),
            })
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::default_metrics;
    use approx::assert_abs_diff_eq;

    fn records(n: usize) -> Vec<PredictionRecord> {
        (0..n)
            .map(|i| {
                let mut r = PredictionRecord::new(format!("p{i}"), "x", i % 2 == 0);
                r.score = Some((i % 7) as f64 / 7.0);
                r
            })
            .collect()
    }

    #[test]
    fn summarize_examples() {
        let s = summarize(&[0.9; 5], &NormalCi).unwrap();
        assert_eq!((s.mean, s.sd, s.ci_low, s.ci_high), (0.9, 0.0, 0.9, 0.9));

        let s = summarize(&[0.8, 0.9, 1.0], &NormalCi).unwrap();
        assert_abs_diff_eq!(s.mean, 0.9, epsilon = 1e-15);
        assert_abs_diff_eq!(s.sd, 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(s.ci_low, 0.9 - Z_95 * 0.1, epsilon = 1e-15);
        // Not clamped to [0, 1].
        assert!(s.ci_high > 1.0);
        assert_abs_diff_eq!(s.ci_low, 0.704, epsilon = 1e-4);
        assert_abs_diff_eq!(s.ci_high, 1.096, epsilon = 1e-4);

        assert!(summarize(&[0.5], &NormalCi).is_err());
    }

    #[test]
    fn percentile_interval() {
        let values: Vec<f64> = (1..=100).map(|i| i as f64 / 100.0).collect();
        let s = summarize(&values, &PercentileCi).unwrap();
        // Order statistic k (0-based) sits at 0.01 (k+1); h = 99q.
        let oracle = |q: f64| {
            let h = 99.0 * q;
            let k = h.floor();
            0.01 * (k + 1.0) + (h - k) * 0.01
        };
        assert_abs_diff_eq!(s.ci_low, oracle(0.025), epsilon = 1e-12);
        assert_abs_diff_eq!(s.ci_high, oracle(0.975), epsilon = 1e-12);
        assert_abs_diff_eq!(s.ci_low, 0.03475, epsilon = 1e-12);
        assert_abs_diff_eq!(s.ci_high, 0.97525, epsilon = 1e-12);
    }

    #[test]
    fn identical_records_have_zero_spread() {
        let mut r = PredictionRecord::new("p", "x", true);
        r.score = Some(0.8);
        let rs: Vec<PredictionRecord> = (0..50)
            .map(|i| PredictionRecord { patch_id: format!("p{i}"), ..r.clone() })
            .collect();
        let refs: Vec<&PredictionRecord> = rs.iter().collect();
        let metrics = default_metrics();
        let d = run_bootstrap(
            &refs,
            &BootstrapSpec::new(50, 10, 50, 3),
            metrics.get("recall").unwrap(),
            0.5,
            &NormalCi,
        )
        .unwrap();
        assert_eq!(d.summary.sd, 0.0);
        assert_eq!(d.summary.ci_low, d.summary.ci_high);
    }

    #[test]
    fn sizes_stay_in_range_and_seed_is_deterministic() {
        let rs = records(300);
        let refs: Vec<&PredictionRecord> = rs.iter().collect();
        let metrics = default_metrics();
        let spec = BootstrapSpec::new(200, 40, 250, 7);
        let a = run_bootstrap(&refs, &spec, metrics.get("auc").unwrap(), 0.5, &NormalCi).unwrap();
        let b = run_bootstrap(&refs, &spec, metrics.get("auc").unwrap(), 0.5, &NormalCi).unwrap();
        assert_eq!(a, b);
        assert!(a.sizes.iter().all(|&n| (40..=250).contains(&n)));
        assert_eq!(a.values.len(), 200);
    }

    #[test]
    fn spec_validation() {
        let rs = records(10);
        let refs: Vec<&PredictionRecord> = rs.iter().collect();
        let m = default_metrics();
        let err = run_bootstrap(
            &refs,
            &BootstrapSpec::new(10, 20, 30, 1),
            m.get("auc").unwrap(),
            0.5,
            &NormalCi,
        );
        assert!(matches!(err, Err(Error::Bootstrap(_))));
        assert!(BootstrapSpec::new(10, 0, 5, 1).validate(10).is_err());
        assert!(BootstrapSpec::new(10, 6, 5, 1).validate(10).is_err());
        assert!(BootstrapSpec::new(0, 1, 5, 1).validate(10).is_err());
    }

    #[test]
    fn mostly_undefined_metric_is_reported() {
        let rs = records(40);
        let refs: Vec<&PredictionRecord> = rs.iter().collect();
        let m = default_metrics();
        // Filter keeps only negatives, so recall is never defined.
        let spec = BootstrapSpec::new(20, 20, 40, 1)
            .with_filter(RecordFilter::new("negatives", |r| !r.truth));
        let err = run_bootstrap(&refs, &spec, m.get("recall").unwrap(), 0.5, &NormalCi)
            .unwrap_err();
        assert!(err.to_string().contains("undefined in 20 of 20"));
    }
}
