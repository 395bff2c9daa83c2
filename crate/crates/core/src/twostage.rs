//! Two-stage TMLE for cluster randomized trials: per-cluster endpoints
//! adjusted for missing outcomes, then a cluster-level effect with the
//! adjustment set chosen by cross-validated influence-curve variance.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{ColumnRole, Dataset};
use crate::error::{Error, Result};
use crate::learners::{fit_learner, Family, LearnerSpec};
use crate::rng::SeededStream;
use crate::stats::mean;
use crate::superlearner::{default_folds, make_folds, FoldPlan};
use crate::tmle::{
    fit_fluctuation, fluctuated, tmle_missing_mean, Diagnostics, EstimateResult, NuisanceConfig, NuisanceMethod,
    Scale, SuperLearnerConfig, VarianceMethod,
};

pub const DEFAULT_RANDOMIZATION: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage1Method {
    EmpiricalMean,
    TmleParametric,
    TmleSuperLearner,
}

impl Stage1Method {
    /// Nuisance configuration for this method, keeping screening and
    /// truncation (and any custom learner) from `base`.
    pub fn nuisance(self, base: &NuisanceConfig) -> NuisanceConfig {
        let pick = |m: &NuisanceMethod| match self {
            Stage1Method::EmpiricalMean => NuisanceMethod::EmpiricalMean,
            Stage1Method::TmleParametric => match m {
                NuisanceMethod::Parametric { .. } => m.clone(),
                _ => NuisanceMethod::Parametric {
                    learner: LearnerSpec::main_terms(Family::Binomial),
                },
            },
            Stage1Method::TmleSuperLearner => match m {
                NuisanceMethod::SuperLearner(_) => m.clone(),
                _ => NuisanceMethod::SuperLearner(SuperLearnerConfig::default_library()),
            },
        };
        NuisanceConfig {
            outcome: pick(&base.outcome),
            propensity: pick(&base.propensity),
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub id: String,
    pub endpoint: f64,
    pub treatment: f64,
    pub covariates: Vec<f64>,
    pub n: usize,
    pub method: Stage1Method,
    /// Stage-1 95% interval for the endpoint.
    pub ci: (f64, f64),
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterTable {
    pub covariate_names: Vec<String>,
    pub summaries: Vec<ClusterSummary>,
}

impl ClusterTable {
    pub fn len(&self) -> usize {
        self.summaries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.summaries.is_empty()
    }

    fn column(&self, name: &str) -> Result<usize> {
        self.covariate_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::SchemaMismatch {
                column: name.to_string(),
                detail: "not a cluster-level covariate".into(),
            })
    }

    fn design(&self, adjustment: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(self.len(), adjustment.len(), |i, j| self.summaries[i].covariates[adjustment[j]])
    }

    fn endpoints(&self) -> Vec<f64> {
        self.summaries.iter().map(|s| s.endpoint).collect()
    }

    fn arms(&self) -> Vec<f64> {
        self.summaries.iter().map(|s| s.treatment).collect()
    }
}

/// Stage 1: one missingness-adjusted endpoint per cluster, each estimated
/// with its own nuisance fits.
pub fn stage1_endpoints(
    data: &Dataset,
    method: Stage1Method,
    cfg: &NuisanceConfig,
    stream: &SeededStream,
) -> Result<ClusterTable> {
    let clusters = data.clusters().ok_or_else(|| Error::SchemaMismatch {
        column: "<cluster_id>".into(),
        detail: "two-stage estimation needs a cluster identifier".into(),
    })?;
    if clusters.len() < 2 {
        return Err(Error::TooFewClusters {
            needed: 2,
            available: clusters.len(),
        });
    }
    let nuisance = method.nuisance(cfg);
    let cov_cols = data.with_role(ColumnRole::ClusterBaseline);
    let a_col = data.role_column(ColumnRole::Treatment)?;
    let mut summaries = Vec::with_capacity(clusters.len());
    for (j, rows) in clusters.members.iter().enumerate() {
        let sub = data.take_rows(rows);
        let n = rows.len();
        let folds = if n >= 4 {
            make_folds(n, default_folds(n).min(n), &stream.derive(j as u64), None, None)?
        } else {
            FoldPlan::round_robin(n, 2)
        };
        let est = tmle_missing_mean(&sub, &nuisance, &folds).map_err(|e| match e {
            Error::NoMeasuredOutcomes { .. } => Error::NoMeasuredOutcomes {
                cluster: Some(clusters.labels[j].clone()),
            },
            other => other,
        })?;
        let first = rows[0];
        let covariates = cov_cols
            .iter()
            .map(|c| {
                c.values[first].ok_or_else(|| Error::DomainViolation {
                    column: c.name.clone(),
                    row: first,
                    detail: "missing cluster covariate".into(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let treatment = a_col.values[first].ok_or_else(|| Error::DomainViolation {
            column: a_col.name.clone(),
            row: first,
            detail: "missing treatment".into(),
        })?;
        summaries.push(ClusterSummary {
            id: clusters.labels[j].clone(),
            endpoint: est.psi.clamp(0.0, 1.0),
            treatment,
            covariates,
            n,
            method,
            ci: est.ci,
            diagnostics: est.diagnostics,
        });
    }
    Ok(ClusterTable {
        covariate_names: cov_cols.iter().map(|c| c.name.clone()).collect(),
        summaries,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectScale {
    Ratio,
    Difference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoStageEstimand {
    pub scale: EffectScale,
    #[serde(default = "default_randomization")]
    pub randomization: f64,
}

fn default_randomization() -> f64 {
    DEFAULT_RANDOMIZATION
}

impl TwoStageEstimand {
    pub fn ratio() -> Self {
        TwoStageEstimand {
            scale: EffectScale::Ratio,
            randomization: DEFAULT_RANDOMIZATION,
        }
    }

    pub fn difference() -> Self {
        TwoStageEstimand {
            scale: EffectScale::Difference,
            randomization: DEFAULT_RANDOMIZATION,
        }
    }
}

/// Candidate adjustment sets in pre-specified order; an empty set is the
/// unadjusted estimator and must come first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApsConfig {
    pub candidates: Vec<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub folds: Option<usize>,
}

impl ApsConfig {
    pub fn unadjusted() -> Self {
        ApsConfig {
            candidates: vec![Vec::new()],
            folds: None,
        }
    }

    /// Unadjusted plus one candidate per shortlisted covariate.
    pub fn limited<S: AsRef<str>>(shortlist: &[S]) -> Self {
        let mut candidates = vec![Vec::new()];
        candidates.extend(shortlist.iter().map(|s| vec![s.as_ref().to_string()]));
        ApsConfig { candidates, folds: None }
    }

    /// Unadjusted, every singleton, then the listed pairs.
    pub fn expanded<S: AsRef<str>>(covariates: &[S], pairs: &[(S, S)]) -> Self {
        let mut aps = ApsConfig::limited(covariates);
        aps.candidates.extend(
            pairs
                .iter()
                .map(|(a, b)| vec![a.as_ref().to_string(), b.as_ref().to_string()]),
        );
        aps
    }

    pub fn validate(&self) -> Result<()> {
        match self.candidates.first() {
            Some(c) if c.is_empty() => {}
            _ => return Err(Error::Config("the first adjustment candidate must be the unadjusted set".into())),
        }
        if let Some(v) = self.folds {
            if v < 2 {
                return Err(Error::Config("adjustment selection needs at least 2 folds".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApsSelection {
    pub chosen: usize,
    pub adjustment: Vec<String>,
    pub cv_variances: Vec<f64>,
    pub folds: FoldPlan,
}

/// Arm-specific targeted means and their influence curves.
struct ArmFit {
    mu: [f64; 2],
    ic: [Vec<f64>; 2],
    epsilon: [f64; 2],
    converged: bool,
    fallback: bool,
}

/// Fits the working model on `train` and evaluates targeted predictions and
/// IC contributions on `eval`.
fn arm_fit(y: &[f64], a: &[f64], e: &DMatrix<f64>, g: f64, train: &[usize], eval: &[usize]) -> Result<ArmFit> {
    let nt = train.len();
    let (q1, q0, fallback): (Vec<f64>, Vec<f64>, bool) = if e.ncols() == 0 {
        let arm_mean = |v: f64| {
            let s: Vec<f64> = train.iter().filter(|&&i| a[i] == v).map(|&i| y[i]).collect();
            mean(&s)
        };
        (vec![arm_mean(1.0); y.len()], vec![arm_mean(0.0); y.len()], false)
    } else {
        let x = DMatrix::from_fn(nt, e.ncols() + 1, |r, c| if c == 0 { a[train[r]] } else { e[(train[r], c - 1)] });
        let yt: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        let fit = fit_learner(&LearnerSpec::main_terms(Family::Binomial), &x, &yt, None, None)?;
        let n = y.len();
        let at = |v: f64| DMatrix::from_fn(n, e.ncols() + 1, |r, c| if c == 0 { v } else { e[(r, c - 1)] });
        (fit.predict(&at(1.0))?, fit.predict(&at(0.0))?, fit.fallback)
    };
    let mut mu = [0.0; 2];
    let mut epsilon = [0.0; 2];
    let mut converged = true;
    let mut ic = [Vec::new(), Vec::new()];
    for (k, (arm, q, gk)) in [(1.0, &q1, g), (0.0, &q0, 1.0 - g)].into_iter().enumerate() {
        let h: Vec<f64> = train.iter().map(|&i| if a[i] == arm { 1.0 / gk } else { 0.0 }).collect();
        let qt: Vec<f64> = train.iter().map(|&i| q[i]).collect();
        let yt: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        let (eps, ok) = fit_fluctuation(&qt, &h, &yt);
        converged &= ok;
        epsilon[k] = eps;
        let star: Vec<f64> = q.iter().map(|v| fluctuated(*v, eps, 1.0 / gk)).collect();
        mu[k] = mean(&train.iter().map(|&i| star[i]).collect::<Vec<_>>());
        ic[k] = eval
            .iter()
            .map(|&i| {
                let hi = if a[i] == arm { 1.0 / gk } else { 0.0 };
                hi * (y[i] - star[i]) + star[i] - mu[k]
            })
            .collect();
    }
    Ok(ArmFit {
        mu: [mu[0], mu[1]],
        ic,
        epsilon,
        converged,
        fallback,
    })
}

fn effect_ic(scale: EffectScale, f: &ArmFit) -> Result<(f64, Vec<f64>)> {
    let [mu1, mu0] = f.mu;
    match scale {
        EffectScale::Difference => Ok((mu1 - mu0, f.ic[0].iter().zip(&f.ic[1]).map(|(a, b)| a - b).collect())),
        EffectScale::Ratio => {
            if !(mu0 > 0.0) || !(mu1 > 0.0) {
                return Err(Error::ZeroDenominator);
            }
            Ok((mu1 / mu0, f.ic[0].iter().zip(&f.ic[1]).map(|(a, b)| a / mu1 - b / mu0).collect()))
        }
    }
}

fn check_arms(a: &[f64]) -> Result<()> {
    for arm in [1u8, 0u8] {
        if !a.contains(&(arm as f64)) {
            return Err(Error::DegenerateArm { arm });
        }
    }
    Ok(())
}

/// Mean over folds of the mean squared held-out IC, divided by the number
/// of clusters.
fn cv_ic_variance(table: &ClusterTable, adjustment: &[usize], estimand: &TwoStageEstimand, folds: &FoldPlan) -> Result<f64> {
    let y = table.endpoints();
    let a = table.arms();
    let e = table.design(adjustment);
    let mut total = 0.0;
    let mut used = 0;
    for v in 0..folds.v {
        let eval = folds.validation_rows(v);
        if eval.is_empty() {
            continue;
        }
        let train = folds.training_rows(v);
        let ta: Vec<f64> = train.iter().map(|&i| a[i]).collect();
        check_arms(&ta)?;
        let fit = arm_fit(&y, &a, &e, estimand.randomization, &train, &eval)?;
        let (_, ic) = effect_ic(estimand.scale, &fit)?;
        total += ic.iter().map(|v| v * v).sum::<f64>() / ic.len() as f64;
        used += 1;
    }
    Ok(total / used as f64 / table.len() as f64)
}

fn resolve(table: &ClusterTable, names: &[String]) -> Result<Vec<usize>> {
    names.iter().map(|n| table.column(n)).collect()
}

/// Picks the adjustment set with the smallest cross-validated IC variance;
/// ties go to the earlier candidate.
pub fn adaptive_prespec(
    table: &ClusterTable,
    aps: &ApsConfig,
    estimand: &TwoStageEstimand,
    stream: &SeededStream,
) -> Result<ApsSelection> {
    aps.validate()?;
    let n = table.len();
    let v = aps.folds.unwrap_or_else(|| default_folds(n));
    if n < 2 * v {
        return Err(Error::TooFewClusters {
            needed: 2 * v,
            available: n,
        });
    }
    let arms: Vec<usize> = table.arms().iter().map(|a| *a as usize).collect();
    check_arms(&table.arms())?;
    let folds = make_folds(n, v, stream, Some(&arms), None)?;
    let mut cv_variances = Vec::with_capacity(aps.candidates.len());
    for cand in &aps.candidates {
        let cols = resolve(table, cand)?;
        cv_variances.push(cv_ic_variance(table, &cols, estimand, &folds)?);
    }
    let mut chosen = 0;
    for (k, v) in cv_variances.iter().enumerate() {
        if *v < cv_variances[chosen] {
            chosen = k;
        }
    }
    Ok(ApsSelection {
        chosen,
        adjustment: aps.candidates[chosen].clone(),
        cv_variances,
        folds,
    })
}

/// Stage 2: cluster-level TMLE of the arm means with known randomization
/// probability and separate fluctuations per arm. `folds` is required for
/// the cross-validated IC variance.
pub fn stage2_effect(
    table: &ClusterTable,
    estimand: &TwoStageEstimand,
    adjustment: &[String],
    variance: VarianceMethod,
    folds: Option<&FoldPlan>,
) -> Result<EstimateResult> {
    let g = estimand.randomization;
    if !(g > 0.0 && g < 1.0) {
        return Err(Error::Config(format!("randomization probability {g} outside (0,1)")));
    }
    let y = table.endpoints();
    let a = table.arms();
    check_arms(&a)?;
    let cols = resolve(table, adjustment)?;
    let e = table.design(&cols);
    let all: Vec<usize> = (0..table.len()).collect();
    let fit = arm_fit(&y, &a, &e, g, &all, &all)?;
    let (psi, ic) = effect_ic(estimand.scale, &fit)?;
    let mut diag = Diagnostics::new();
    diag.min_propensity = g.min(1.0 - g);
    diag.max_propensity = g.max(1.0 - g);
    diag.converged = fit.converged;
    diag.fallbacks = fit.fallback as usize;
    for s in &table.summaries {
        diag.positivity_flag |= s.diagnostics.positivity_flag;
    }
    let scale = match estimand.scale {
        EffectScale::Ratio => Scale::Ratio,
        EffectScale::Difference => Scale::Difference,
    };
    let mut result = EstimateResult::from_ic(psi, scale, ic, fit.epsilon.to_vec(), diag);
    match variance {
        VarianceMethod::InfluenceCurve => {}
        VarianceMethod::CrossValidatedIc => {
            let folds = folds.ok_or_else(|| Error::Config("cross-validated IC variance needs a fold plan".into()))?;
            result.set_variance(cv_ic_variance(table, &cols, estimand, folds)?);
        }
        VarianceMethod::Bootstrap { .. } => {
            return Err(Error::Config("bootstrap variance is not offered for the two-stage estimator".into()))
        }
    }
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStageSpec {
    pub stage1: Stage1Method,
    pub nuisance: NuisanceConfig,
    pub aps: ApsConfig,
    pub estimand: TwoStageEstimand,
    #[serde(default)]
    pub variance: VarianceMethod,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStageResult {
    pub estimate: EstimateResult,
    pub clusters: ClusterTable,
    pub selection: ApsSelection,
}

/// Both stages end to end.
pub fn two_stage(data: &Dataset, spec: &TwoStageSpec, stream: &SeededStream) -> Result<TwoStageResult> {
    spec.nuisance.validate()?;
    let clusters = stage1_endpoints(data, spec.stage1, &spec.nuisance, &stream.derive(1))?;
    let selection = adaptive_prespec(&clusters, &spec.aps, &spec.estimand, &stream.derive(2))?;
    let estimate = stage2_effect(
        &clusters,
        &spec.estimand,
        &selection.adjustment,
        spec.variance,
        Some(&selection.folds),
    )?;
    Ok(TwoStageResult {
        estimate,
        clusters,
        selection,
    })
}
