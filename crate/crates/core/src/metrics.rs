//! Confusion-matrix metrics, rank-based AUC and ROC curves.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::records::{derive_predicted, PredictionRecord};
use crate::registry::{Named, Registry};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> u64 {
        self.tn + self.fp
    }

    pub fn total(&self) -> u64 {
        self.positives() + self.negatives()
    }

    pub fn add(&mut self, truth: bool, predicted: bool) {
        match (truth, predicted) {
            (true, true) => self.tp += 1,
            (true, false) => self.fn_ += 1,
            (false, true) => self.fp += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn recall(&self) -> Option<f64> {
        ratio(self.tp, self.positives())
    }

    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn f1(&self) -> Option<f64> {
        let (p, r) = (self.precision()?, self.recall()?);
        if p + r == 0.0 {
            None
        } else {
            Some(2.0 * p * r / (p + r))
        }
    }

    pub fn fnr(&self) -> Option<f64> {
        ratio(self.fn_, self.positives())
    }

    pub fn fpr(&self) -> Option<f64> {
        ratio(self.fp, self.negatives())
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn confusion<'a>(
    records: impl IntoIterator<Item = &'a PredictionRecord>,
    threshold: f64,
) -> Result<ConfusionCounts> {
    let mut counts = ConfusionCounts::default();
    for r in records {
        counts.add(r.truth, derive_predicted(r, threshold)?);
    }
    if counts.total() == 0 {
        return Err(Error::EmptySubset("confusion matrix over zero records".into()));
    }
    Ok(counts)
}

/// Metrics of one record subset. `None` marks an undefined value.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub accuracy: Option<f64>,
    pub auc: Option<f64>,
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
    pub fnr: Option<f64>,
    pub fpr: Option<f64>,
}

impl MetricSet {
    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "accuracy" => self.accuracy,
            "auc" => self.auc,
            "recall" => self.recall,
            "precision" => self.precision,
            "f1" => self.f1,
            "fnr" => self.fnr,
            "fpr" => self.fpr,
            _ => None,
        }
    }
}

/// Metric set of `counts`; AUC comes from `records` when it is defined there.
pub fn metric_set<'a>(
    counts: &ConfusionCounts,
    records: impl IntoIterator<Item = &'a PredictionRecord>,
) -> MetricSet {
    MetricSet {
        accuracy: counts.accuracy(),
        auc: auc(records).ok(),
        recall: counts.recall(),
        precision: counts.precision(),
        f1: counts.f1(),
        fnr: counts.fnr(),
        fpr: counts.fpr(),
    }
}

fn scored<'a>(
    records: impl IntoIterator<Item = &'a PredictionRecord>,
) -> Result<(Vec<(f64, bool)>, u64, u64)> {
    let mut pairs = Vec::new();
    let (mut pos, mut neg) = (0u64, 0u64);
    for r in records {
        let score = r.score.ok_or_else(|| Error::Undefined {
            metric: "auc".into(),
            reason: format!("record `{}` has no score", r.patch_id),
        })?;
        if r.truth {
            pos += 1;
        } else {
            neg += 1;
        }
        pairs.push((score, r.truth));
    }
    if pos == 0 || neg == 0 {
        return Err(Error::Undefined {
            metric: "auc".into(),
            reason: "subset lacks one of the classes".into(),
        });
    }
    Ok((pairs, pos, neg))
}

/// Mann-Whitney AUC with half credit for ties.
///
/// Counts in doubled integer units so the result equals exhaustive pair
/// counting up to the final division.
pub fn auc<'a>(records: impl IntoIterator<Item = &'a PredictionRecord>) -> Result<f64> {
    let (mut pairs, pos, neg) = scored(records)?;
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut twice_u: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < pairs.len() {
        let score = pairs[i].0;
        let (mut p, mut n) = (0u128, 0u128);
        while i < pairs.len() && pairs[i].0 == score {
            if pairs[i].1 {
                p += 1;
            } else {
                n += 1;
            }
            i += 1;
        }
        twice_u += p * (2 * neg_below + n);
        neg_below += n;
    }
    Ok(twice_u as f64 / (2.0 * pos as f64 * neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Records with score >= threshold are called positive. The first point
    /// uses +inf.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

impl RocCurve {
    /// Trapezoidal area under the curve.
    pub fn area(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) * 0.5)
            .sum()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "threshold,fpr,tpr")?;
        for p in &self.points {
            if p.threshold.is_infinite() {
                writeln!(out, "inf,{},{}", p.fpr, p.tpr)?;
            } else {
                writeln!(out, "{},{},{}", p.threshold, p.fpr, p.tpr)?;
            }
        }
        Ok(())
    }
}

pub fn roc_curve<'a>(records: impl IntoIterator<Item = &'a PredictionRecord>) -> Result<RocCurve> {
    let (mut pairs, pos, neg) = scored(records)?;
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < pairs.len() {
        let score = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == score {
            if pairs[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: score,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    Ok(RocCurve { points })
}

/// A scalar performance metric over a record subset.
///
/// `Ok(None)` means the metric is undefined on this subset (an empty
/// denominator or a missing class); errors are reserved for bad input.
pub trait Metric: Named + Send + Sync {
    fn evaluate(&self, records: &[&PredictionRecord], threshold: f64) -> Result<Option<f64>>;
}

/// Metric computed from the confusion matrix alone.
pub struct CountMetric {
    name: &'static str,
    compute: fn(&ConfusionCounts) -> Option<f64>,
}

impl CountMetric {
    pub const fn new(name: &'static str, compute: fn(&ConfusionCounts) -> Option<f64>) -> Self {
        Self { name, compute }
    }
}

impl Named for CountMetric {
    fn name(&self) -> &'static str {
        self.name
    }
}

impl Metric for CountMetric {
    fn evaluate(&self, records: &[&PredictionRecord], threshold: f64) -> Result<Option<f64>> {
        if records.is_empty() {
            return Ok(None);
        }
        let counts = confusion(records.iter().copied(), threshold)?;
        Ok((self.compute)(&counts))
    }
}

pub struct AucMetric;

impl Named for AucMetric {
    fn name(&self) -> &'static str {
        "auc"
    }
}

impl Metric for AucMetric {
    fn evaluate(&self, records: &[&PredictionRecord], _threshold: f64) -> Result<Option<f64>> {
        match auc(records.iter().copied()) {
            Ok(v) => Ok(Some(v)),
            Err(Error::Undefined { reason, .. }) if reason.contains("classes") => Ok(None),
            Err(e) => Err(e),
        }
    }
}

pub type MetricRegistry = Registry<dyn Metric>;

/// Names in the order reports list them.
pub const METRIC_NAMES: [&str; 7] = ["accuracy", "auc", "recall", "precision", "f1", "fnr", "fpr"];

pub fn default_metrics() -> MetricRegistry {
    let mut reg = MetricRegistry::new("metric");
    reg.register(Box::new(CountMetric::new("accuracy", ConfusionCounts::accuracy)))
        .register(Box::new(AucMetric))
        .register(Box::new(CountMetric::new("recall", ConfusionCounts::recall)))
        .register(Box::new(CountMetric::new("precision", ConfusionCounts::precision)))
        .register(Box::new(CountMetric::new("f1", ConfusionCounts::f1)))
        .register(Box::new(CountMetric::new("fnr", ConfusionCounts::fnr)))
        .register(Box::new(CountMetric::new("fpr", ConfusionCounts::fpr)));
    reg
}
