//! Performance metrics over Monte Carlo iterations and the two-step
//! constrained selection of a primary estimator.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plasmode::TrueEffect;
use crate::stats::{mean, population_variance, sample_variance};
use crate::twostage::EffectScale;

pub const LEVEL: f64 = 0.05;
pub const Z_95: f64 = 1.959963984540054;
pub const COVERAGE_FLOOR: f64 = 0.93;
pub const MAX_FAILURE_RATE: f64 = 0.05;

/// One (estimator, iteration) cell. Failed cells carry no numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub estimator_id: String,
    pub iteration: u64,
    pub psi_hat: Option<f64>,
    pub var_hat: Option<f64>,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    pub p_value: Option<f64>,
    pub reject: bool,
    pub failed: bool,
    /// Clusters whose stage-1 interval covered the pre-deletion endpoint.
    pub endpoint_covered: Option<u64>,
    pub endpoint_total: Option<u64>,
    /// Mean of the influence curve at the estimate.
    pub ic_mean: Option<f64>,
    /// Learner fallbacks.
    pub fallbacks: u64,
    pub positivity_flag: bool,
    pub error: Option<String>,
}

impl IterationRecord {
    pub fn success(estimator_id: &str, iteration: u64, psi: f64, variance: f64, ci: (f64, f64), p_value: f64) -> Self {
        IterationRecord {
            estimator_id: estimator_id.to_string(),
            iteration,
            psi_hat: Some(psi),
            var_hat: Some(variance),
            ci_lo: Some(ci.0),
            ci_hi: Some(ci.1),
            p_value: Some(p_value),
            reject: p_value < LEVEL,
            failed: false,
            endpoint_covered: None,
            endpoint_total: None,
            ic_mean: None,
            fallbacks: 0,
            positivity_flag: false,
            error: None,
        }
    }

    pub fn failure(estimator_id: &str, iteration: u64, error: impl Into<String>) -> Self {
        IterationRecord {
            estimator_id: estimator_id.to_string(),
            iteration,
            psi_hat: None,
            var_hat: None,
            ci_lo: None,
            ci_hi: None,
            p_value: None,
            reject: false,
            failed: true,
            endpoint_covered: None,
            endpoint_total: None,
            ic_mean: None,
            fallbacks: 0,
            positivity_flag: false,
            error: Some(error.into()),
        }
    }
}

pub fn sort_records(records: &mut [IterationRecord]) {
    records.sort_by(|a, b| (&a.estimator_id, a.iteration).cmp(&(&b.estimator_id, b.iteration)));
}

pub fn write_records<W: Write>(records: &[IterationRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records<R: Read>(input: R) -> Result<Vec<IterationRecord>> {
    let mut rd = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for r in rd.deserialize() {
        let rec: IterationRecord = r?;
        if !rec.failed {
            let p = rec.p_value.ok_or_else(|| Error::Config(format!("row for `{}` lacks a p-value", rec.estimator_id)))?;
            if rec.reject != (p < LEVEL) {
                return Err(Error::Config(format!(
                    "reject flag of `{}` iteration {} disagrees with its p-value",
                    rec.estimator_id, rec.iteration
                )));
            }
        }
        out.push(rec);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectionLabel {
    Power,
    TypeIError,
}

/// Per-estimator summary. Ratio-scale estimators are summarized on the log
/// scale, with the truth log-transformed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorMetrics {
    pub estimator_id: String,
    #[serde(default)]
    pub axes: BTreeMap<String, String>,
    pub log_scale: bool,
    pub truth: f64,
    pub iterations: usize,
    pub failures: usize,
    pub failure_rate: f64,
    pub mean_estimate: f64,
    pub bias: f64,
    /// Sample variance (R - 1) of the point estimates.
    pub variance: f64,
    pub variance_population: f64,
    pub mse: f64,
    /// Bias divided by the variance of the estimates.
    pub bias_variance_ratio: Option<f64>,
    pub bias_se_ratio: Option<f64>,
    pub mean_estimated_variance: f64,
    /// Empirical variance over the mean estimated variance.
    pub variance_ratio: Option<f64>,
    pub oracle_coverage: f64,
    pub ci_coverage: f64,
    pub rejection_rate: f64,
    pub rejection_label: RejectionLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint_coverage: Option<f64>,
    pub fallbacks: u64,
    pub positivity_flags: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InsufficientEstimator {
    pub estimator_id: String,
    pub iterations: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub truth: TrueEffect,
    pub estimators: Vec<EstimatorMetrics>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub insufficient: Vec<InsufficientEstimator>,
}

impl MetricsReport {
    pub fn get(&self, id: &str) -> Option<&EstimatorMetrics> {
        self.estimators.iter().find(|m| m.estimator_id == id)
    }
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

/// Metrics for the records of a single estimator.
pub fn compute_metrics(records: &[IterationRecord], truth: &TrueEffect) -> Result<EstimatorMetrics> {
    let id = records.first().map(|r| r.estimator_id.clone()).unwrap_or_default();
    if records.iter().any(|r| r.estimator_id != id) {
        return Err(Error::Config("compute_metrics expects records of one estimator".into()));
    }
    let mut sorted: Vec<&IterationRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.iteration);
    let ok: Vec<&IterationRecord> = sorted.iter().copied().filter(|r| !r.failed).collect();
    let failures = sorted.len() - ok.len();
    if ok.len() < 2 {
        return Err(Error::TooFewIterations {
            estimator: id,
            available: ok.len(),
        });
    }
    let log_scale = truth.scale == EffectScale::Ratio;
    let tx = |v: f64| if log_scale { v.ln() } else { v };
    let t = tx(truth.value);
    let missing = |what: &str, r: &IterationRecord| {
        Error::Config(format!("`{}` iteration {} has no {what}", r.estimator_id, r.iteration))
    };
    let mut psi = Vec::with_capacity(ok.len());
    let mut var_hat = Vec::with_capacity(ok.len());
    let mut covered = 0usize;
    let mut rejected = 0usize;
    for r in &ok {
        psi.push(tx(r.psi_hat.ok_or_else(|| missing("estimate", r))?));
        var_hat.push(r.var_hat.ok_or_else(|| missing("variance", r))?);
        let lo = tx(r.ci_lo.ok_or_else(|| missing("interval", r))?);
        let hi = tx(r.ci_hi.ok_or_else(|| missing("interval", r))?);
        if lo <= t && t <= hi {
            covered += 1;
        }
        if r.reject {
            rejected += 1;
        }
    }
    let r_n = ok.len() as f64;
    let mean_estimate = mean(&psi);
    let bias = mean_estimate - t;
    let variance = sample_variance(&psi);
    let variance_population = population_variance(&psi);
    let mse = psi.iter().map(|p| (p - t) * (p - t)).sum::<f64>() / r_n;
    let sd = variance.sqrt();
    let oracle = psi.iter().filter(|p| (*p - t).abs() <= Z_95 * sd).count();
    let mean_estimated_variance = mean(&var_hat);
    let (ec, et) = ok.iter().fold((0u64, 0u64), |acc, r| {
        (acc.0 + r.endpoint_covered.unwrap_or(0), acc.1 + r.endpoint_total.unwrap_or(0))
    });
    Ok(EstimatorMetrics {
        estimator_id: id,
        axes: BTreeMap::new(),
        log_scale,
        truth: t,
        iterations: ok.len(),
        failures,
        failure_rate: failures as f64 / sorted.len() as f64,
        mean_estimate,
        bias,
        variance,
        variance_population,
        mse,
        bias_variance_ratio: finite(bias / variance),
        bias_se_ratio: finite(bias / sd),
        mean_estimated_variance,
        variance_ratio: finite(variance / mean_estimated_variance),
        oracle_coverage: oracle as f64 / r_n,
        ci_coverage: covered as f64 / r_n,
        rejection_rate: rejected as f64 / r_n,
        rejection_label: if truth.is_null() { RejectionLabel::TypeIError } else { RejectionLabel::Power },
        endpoint_coverage: (et > 0).then(|| ec as f64 / et as f64),
        fallbacks: ok.iter().map(|r| r.fallbacks).sum(),
        positivity_flags: ok.iter().filter(|r| r.positivity_flag).count(),
    })
}

/// A candidate estimator with its position on each selection axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    #[serde(default)]
    pub axes: BTreeMap<String, String>,
}

/// Aggregates every estimator in `candidates` order; estimators present in
/// the records but not listed follow in id order.
pub fn compute_report(records: &[IterationRecord], truth: &TrueEffect, candidates: &[Candidate]) -> Result<MetricsReport> {
    let mut by_id: BTreeMap<&str, Vec<IterationRecord>> = BTreeMap::new();
    for r in records {
        by_id.entry(r.estimator_id.as_str()).or_default().push(r.clone());
    }
    let mut order: Vec<Candidate> = candidates.to_vec();
    for id in by_id.keys() {
        if !order.iter().any(|c| c.id == *id) {
            order.push(Candidate {
                id: id.to_string(),
                axes: BTreeMap::new(),
            });
        }
    }
    let mut estimators = Vec::new();
    let mut insufficient = Vec::new();
    for c in order {
        let recs = by_id.get(c.id.as_str()).cloned().unwrap_or_default();
        match compute_metrics(&recs, truth) {
            Ok(mut m) => {
                m.estimator_id = c.id.clone();
                m.axes = c.axes.clone();
                estimators.push(m);
            }
            Err(Error::TooFewIterations { available, .. }) => insufficient.push(InsufficientEstimator {
                estimator_id: c.id.clone(),
                iterations: available,
                failures: recs.len() - available,
            }),
            Err(e) => return Err(e),
        }
    }
    Ok(MetricsReport {
        truth: *truth,
        estimators,
        insufficient,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Bias,
    AbsBias,
    Variance,
    Mse,
    MeanEstimatedVariance,
    VarianceRatio,
    OracleCoverage,
    CiCoverage,
    EndpointCoverage,
    RejectionRate,
    TypeIError,
    Power,
    /// Distance of the rejection rate from the nominal level.
    RejectionGap,
    FailureRate,
}

impl Metric {
    /// `Err` when the metric is not defined for this report.
    pub fn value(self, m: &EstimatorMetrics) -> Result<f64> {
        let undefined = |why: &str| Err(Error::Config(format!("metric {self:?} undefined for `{}`: {why}", m.estimator_id)));
        match self {
            Metric::Bias => Ok(m.bias),
            Metric::AbsBias => Ok(m.bias.abs()),
            Metric::Variance => Ok(m.variance),
            Metric::Mse => Ok(m.mse),
            Metric::MeanEstimatedVariance => Ok(m.mean_estimated_variance),
            Metric::VarianceRatio => Ok(m.variance_ratio.unwrap_or(f64::INFINITY)),
            Metric::OracleCoverage => Ok(m.oracle_coverage),
            Metric::CiCoverage => Ok(m.ci_coverage),
            Metric::EndpointCoverage => match m.endpoint_coverage {
                Some(v) => Ok(v),
                None => undefined("no endpoint intervals recorded"),
            },
            Metric::RejectionRate => Ok(m.rejection_rate),
            Metric::TypeIError => match m.rejection_label {
                RejectionLabel::TypeIError => Ok(m.rejection_rate),
                RejectionLabel::Power => undefined("the true effect is not null"),
            },
            Metric::Power => match m.rejection_label {
                RejectionLabel::Power => Ok(m.rejection_rate),
                RejectionLabel::TypeIError => undefined("the true effect is null"),
            },
            Metric::RejectionGap => Ok((m.rejection_rate - LEVEL).abs()),
            Metric::FailureRate => Ok(m.failure_rate),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparator {
    AtLeast,
    AtMost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub metric: Metric,
    pub comparator: Comparator,
    pub threshold: f64,
    /// Adds `k` binomial standard errors `sqrt(t(1-t)/R)` to the threshold
    /// in the lenient direction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub binomial_slack: Option<f64>,
}

impl Constraint {
    pub fn at_least(metric: Metric, threshold: f64) -> Self {
        Constraint {
            metric,
            comparator: Comparator::AtLeast,
            threshold,
            binomial_slack: None,
        }
    }

    pub fn at_most(metric: Metric, threshold: f64) -> Self {
        Constraint {
            metric,
            comparator: Comparator::AtMost,
            threshold,
            binomial_slack: None,
        }
    }

    pub fn type_i_ceiling() -> Self {
        Constraint {
            binomial_slack: Some(2.0),
            ..Constraint::at_most(Metric::TypeIError, LEVEL)
        }
    }

    pub fn effective_threshold(&self, iterations: usize) -> f64 {
        let slack = self
            .binomial_slack
            .map(|k| k * (self.threshold * (1.0 - self.threshold) / iterations.max(1) as f64).sqrt())
            .unwrap_or(0.0);
        match self.comparator {
            Comparator::AtLeast => self.threshold - slack,
            Comparator::AtMost => self.threshold + slack,
        }
    }

    /// Amount by which `value` misses the constraint (0 when satisfied).
    fn violation(&self, value: f64, iterations: usize) -> f64 {
        let t = self.effective_threshold(iterations);
        if value.is_nan() {
            return f64::INFINITY;
        }
        match self.comparator {
            Comparator::AtLeast => (t - value).max(0.0),
            Comparator::AtMost => (value - t).max(0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Minimize,
    Maximize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub metric: Metric,
    pub direction: Direction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionStep {
    /// Axis name; candidates without this axis form singleton groups.
    pub axis: String,
    pub constraints: Vec<Constraint>,
    pub objective: Objective,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionScheme {
    pub name: String,
    pub steps: Vec<SelectionStep>,
}

impl SelectionScheme {
    /// (i) nuisance approach minimizing empirical variance with oracle
    /// coverage kept; (ii) variance estimator minimizing the estimated
    /// variance with CI coverage kept.
    pub fn observational() -> Self {
        SelectionScheme {
            name: "observational".into(),
            steps: vec![
                SelectionStep {
                    axis: "nuisance".into(),
                    constraints: vec![Constraint::at_least(Metric::OracleCoverage, COVERAGE_FLOOR)],
                    objective: Objective {
                        metric: Metric::Variance,
                        direction: Direction::Minimize,
                    },
                },
                SelectionStep {
                    axis: "variance".into(),
                    constraints: vec![Constraint::at_least(Metric::CiCoverage, COVERAGE_FLOOR)],
                    objective: Objective {
                        metric: Metric::MeanEstimatedVariance,
                        direction: Direction::Minimize,
                    },
                },
            ],
        }
    }

    /// (i) endpoint estimator with endpoint coverage and Type-I control;
    /// (ii) effect estimator with Type-I error closest to nominal.
    pub fn trial() -> Self {
        SelectionScheme {
            name: "trial".into(),
            steps: vec![
                SelectionStep {
                    axis: "endpoint".into(),
                    constraints: vec![
                        Constraint::at_least(Metric::EndpointCoverage, COVERAGE_FLOOR),
                        Constraint::type_i_ceiling(),
                    ],
                    objective: Objective {
                        metric: Metric::Variance,
                        direction: Direction::Minimize,
                    },
                },
                SelectionStep {
                    axis: "effect".into(),
                    constraints: vec![Constraint::type_i_ceiling()],
                    objective: Objective {
                        metric: Metric::RejectionGap,
                        direction: Direction::Minimize,
                    },
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::Config(format!("selection scheme `{}` has no steps", self.name)));
        }
        for s in &self.steps {
            for c in &s.constraints {
                if !c.threshold.is_finite() || c.binomial_slack.is_some_and(|k| !(k >= 0.0)) {
                    return Err(Error::Config(format!("invalid constraint on {:?}", c.metric)));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAudit {
    pub level: String,
    pub members: Vec<String>,
    /// Constraint metric values, in constraint order (group means).
    pub constraint_values: Vec<f64>,
    pub violation: f64,
    pub passed: bool,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepAudit {
    pub step: usize,
    pub axis: String,
    pub groups: Vec<GroupAudit>,
    pub relaxed: bool,
    pub chosen: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub scheme: String,
    pub winner: String,
    /// Other candidates meeting every constraint, in pre-specified order.
    pub sensitivity: Vec<String>,
    /// Candidates removed before any step (too many failures or too few
    /// successful iterations).
    pub disqualified: Vec<String>,
    pub steps: Vec<StepAudit>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

fn level_of(m: &EstimatorMetrics, axis: &str) -> String {
    m.axes.get(axis).cloned().unwrap_or_else(|| m.estimator_id.clone())
}

fn meets_all(m: &EstimatorMetrics, scheme: &SelectionScheme) -> Result<bool> {
    for s in &scheme.steps {
        for c in &s.constraints {
            if c.violation(c.metric.value(m)?, m.iterations) > 0.0 {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Runs the scheme over the report's estimators in their listed order.
pub fn select_estimator(report: &MetricsReport, scheme: &SelectionScheme) -> Result<SelectionReport> {
    scheme.validate()?;
    if report.estimators.is_empty() && report.insufficient.is_empty() {
        return Err(Error::EmptyCandidateSet);
    }
    let mut disqualified: Vec<String> = report.insufficient.iter().map(|i| i.estimator_id.clone()).collect();
    let mut pool: Vec<&EstimatorMetrics> = Vec::new();
    for m in &report.estimators {
        if m.failure_rate > MAX_FAILURE_RATE {
            disqualified.push(m.estimator_id.clone());
        } else {
            pool.push(m);
        }
    }
    let mut notes = Vec::new();
    if pool.is_empty() {
        // Every candidate failed too often; fall back to the lowest failure rate.
        let best = report
            .estimators
            .iter()
            .min_by(|a, b| a.failure_rate.total_cmp(&b.failure_rate))
            .ok_or(Error::EmptyCandidateSet)?;
        notes.push(format!(
            "all candidates exceed the failure limit; kept `{}` with the lowest failure rate",
            best.estimator_id
        ));
        disqualified.retain(|d| d != &best.estimator_id);
        pool.push(best);
    }
    if pool.len() == 1 {
        notes.push("unopposed".into());
    }
    let mut steps = Vec::new();
    for (k, step) in scheme.steps.iter().enumerate() {
        let mut levels: Vec<String> = Vec::new();
        for m in &pool {
            let l = level_of(m, &step.axis);
            if !levels.contains(&l) {
                levels.push(l);
            }
        }
        let mut groups = Vec::new();
        for l in &levels {
            let members: Vec<&EstimatorMetrics> = pool.iter().copied().filter(|m| &level_of(m, &step.axis) == l).collect();
            let group_value = |metric: Metric| -> Result<f64> {
                let v: Result<Vec<f64>> = members.iter().map(|m| metric.value(m)).collect();
                Ok(mean(&v?))
            };
            let iterations = members.iter().map(|m| m.iterations).min().unwrap_or(0);
            let mut constraint_values = Vec::new();
            let mut violation = 0.0;
            for c in &step.constraints {
                let v = group_value(c.metric)?;
                violation += c.violation(v, iterations);
                constraint_values.push(v);
            }
            let mut objective = group_value(step.objective.metric)?;
            if objective.is_nan() {
                objective = match step.objective.direction {
                    Direction::Minimize => f64::INFINITY,
                    Direction::Maximize => f64::NEG_INFINITY,
                };
            }
            groups.push(GroupAudit {
                level: l.clone(),
                members: members.iter().map(|m| m.estimator_id.clone()).collect(),
                constraint_values,
                violation,
                passed: violation == 0.0,
                objective,
            });
        }
        let mut step_notes = Vec::new();
        let relaxed = !groups.iter().any(|g| g.passed);
        let eligible: Vec<usize> = if relaxed {
            let closest = groups.iter().map(|g| g.violation).fold(f64::INFINITY, f64::min);
            let kept: Vec<usize> = (0..groups.len()).filter(|&i| groups[i].violation == closest).collect();
            step_notes.push(format!(
                "no level met the constraints; relaxed to the closest: {}",
                kept.iter().map(|&i| groups[i].level.as_str()).collect::<Vec<_>>().join(", ")
            ));
            kept
        } else {
            (0..groups.len()).filter(|&i| groups[i].passed).collect()
        };
        let mut best = eligible[0];
        for &i in &eligible[1..] {
            let better = match step.objective.direction {
                Direction::Minimize => groups[i].objective < groups[best].objective,
                Direction::Maximize => groups[i].objective > groups[best].objective,
            };
            if better {
                best = i;
            }
        }
        if levels.len() == 1 {
            step_notes.push("unopposed".into());
        }
        let chosen = groups[best].level.clone();
        pool.retain(|m| level_of(m, &step.axis) == chosen);
        steps.push(StepAudit {
            step: k + 1,
            axis: step.axis.clone(),
            groups,
            relaxed,
            chosen,
            notes: step_notes,
        });
    }
    let winner = pool[0].estimator_id.clone();
    if pool.len() > 1 {
        notes.push(format!("{} candidates remained after all steps; took the earliest", pool.len()));
    }
    let mut sensitivity = Vec::new();
    for m in &report.estimators {
        if m.estimator_id != winner && !disqualified.contains(&m.estimator_id) && meets_all(m, scheme)? {
            sensitivity.push(m.estimator_id.clone());
        }
    }
    Ok(SelectionReport {
        scheme: scheme.name.clone(),
        winner,
        sensitivity,
        disqualified,
        steps,
        notes,
    })
}
