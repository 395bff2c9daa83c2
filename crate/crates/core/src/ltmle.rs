//! Longitudinal TMLE through the iterated conditional expectation form of
//! the g-formula, with cumulative clever covariates and bootstrap variance.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{ColumnRole, Dataset};
use crate::error::{Error, Result};
use crate::rng::SeededStream;
use crate::stats::{mean, sample_variance, Z_95};
use crate::superlearner::{make_folds, FoldPlan};
use crate::tmle::{
    covariate_matrix, fit_fluctuation, fit_nuisance, fluctuated, unit_rescale, Diagnostics, EstimateResult,
    NuisanceConfig, NuisanceFit, NuisanceMethod, Scale, VarianceMethod,
};

pub const DEFAULT_WEIGHT_BOUND: f64 = 40.0;
pub const MIN_BOOTSTRAP: usize = 200;

/// Static treatment plan with no censoring through the horizon.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Regimen {
    pub treatment: Vec<u8>,
}

impl Regimen {
    pub fn constant(value: u8, periods: usize) -> Self {
        Regimen {
            treatment: vec![value; periods],
        }
    }

    pub fn horizon(&self) -> usize {
        self.treatment.len().saturating_sub(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LtmleConfig {
    /// Nuisance methods shared by every time point. Per-factor propensity
    /// truncation is not used here; see `weight_bound`.
    pub nuisance: NuisanceConfig,
    /// Upper bound on the cumulative clever covariate; `None` disables it.
    #[serde(default = "default_bound")]
    pub weight_bound: Option<f64>,
    #[serde(default)]
    pub variance: VarianceMethod,
}

fn default_bound() -> Option<f64> {
    Some(DEFAULT_WEIGHT_BOUND)
}

impl LtmleConfig {
    pub fn new(nuisance: NuisanceConfig) -> Self {
        LtmleConfig {
            nuisance,
            weight_bound: Some(DEFAULT_WEIGHT_BOUND),
            variance: VarianceMethod::InfluenceCurve,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.nuisance.validate()?;
        if let Some(b) = self.weight_bound {
            if !(b > 1.0) {
                return Err(Error::Config(format!("weight bound {b} must exceed 1")));
            }
        }
        match self.variance {
            VarianceMethod::Bootstrap { replicates } if replicates < MIN_BOOTSTRAP => Err(Error::Config(format!(
                "bootstrap needs at least {MIN_BOOTSTRAP} replicates, got {replicates}"
            ))),
            VarianceMethod::CrossValidatedIc => Err(Error::Config(
                "cross-validated IC variance is only defined for the two-stage estimator".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// Wide-format longitudinal data: one row per subject, periods `0..=t_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub subjects: Vec<String>,
    pub baseline: DMatrix<f64>,
    /// Time-varying covariates L(t), NaN where the subject has no record.
    pub covariates: Vec<DMatrix<f64>>,
    /// A(t) per period; `None` for designs without a treatment node.
    pub treatment: Option<Vec<Vec<f64>>>,
    /// C(t) per period (1 = censored after this period's treatment).
    pub censoring: Option<Vec<Vec<f64>>>,
    pub present: Vec<Vec<bool>>,
    /// Terminal outcome, NaN unless observed.
    pub outcome: Vec<f64>,
}

fn nan_free(v: f64) -> bool {
    !v.is_nan()
}

impl Panel {
    /// Builds a panel and checks monotone censoring.
    pub fn new(
        subjects: Vec<String>,
        baseline: DMatrix<f64>,
        covariates: Vec<DMatrix<f64>>,
        treatment: Option<Vec<Vec<f64>>>,
        censoring: Option<Vec<Vec<f64>>>,
        outcome: Vec<f64>,
    ) -> Result<Panel> {
        let n = outcome.len();
        let periods = covariates.len();
        if n == 0 || periods == 0 {
            return Err(Error::EmptyDataset);
        }
        let shape_ok = subjects.len() == n
            && baseline.nrows() == n
            && covariates.iter().all(|m| m.nrows() == n)
            && treatment
                .as_ref()
                .is_none_or(|a| a.len() == periods && a.iter().all(|v| v.len() == n))
            && censoring
                .as_ref()
                .is_none_or(|c| c.len() == periods && c.iter().all(|v| v.len() == n));
        if !shape_ok {
            return Err(Error::DimensionMismatch("panel components disagree in shape".into()));
        }
        let censored = |t: usize, i: usize| censoring.as_ref().is_some_and(|c| c[t][i] == 1.0);
        let mut present = vec![vec![false; n]; periods];
        for i in 0..n {
            let mut alive = true;
            for t in 0..periods {
                let has = covariates[t].row(i).iter().all(|v| nan_free(*v))
                    && treatment.as_ref().is_none_or(|a| nan_free(a[t][i]))
                    && censoring.as_ref().is_none_or(|c| nan_free(c[t][i]));
                if has && !alive {
                    return Err(Error::NonMonotoneCensoring {
                        subject: subjects[i].clone(),
                    });
                }
                if !has && alive {
                    return Err(Error::NonMonotoneCensoring {
                        subject: subjects[i].clone(),
                    });
                }
                present[t][i] = has;
                if has && censored(t, i) {
                    alive = false;
                }
            }
            let finished = alive;
            if finished && outcome[i].is_nan() {
                return Err(Error::DomainViolation {
                    column: "outcome".into(),
                    row: i,
                    detail: format!("subject {} is uncensored but has no outcome", subjects[i]),
                });
            }
        }
        Ok(Panel {
            subjects,
            baseline,
            covariates,
            treatment,
            censoring,
            present,
            outcome,
        })
    }

    pub fn n(&self) -> usize {
        self.outcome.len()
    }

    pub fn periods(&self) -> usize {
        self.covariates.len()
    }

    /// Converts long-format data (one row per subject and period) into a
    /// panel. Baseline values come from each subject's first record and the
    /// outcome from its last.
    pub fn from_dataset(ds: &Dataset) -> Result<Panel> {
        let subjects = ds.subjects().ok_or_else(|| Error::SchemaMismatch {
            column: "<subject_id>".into(),
            detail: "longitudinal data needs a subject identifier".into(),
        })?;
        let time = ds.role_column(ColumnRole::TimeIndex)?;
        let mut times: Vec<i64> = time.values.iter().flatten().map(|v| *v as i64).collect();
        times.sort_unstable();
        times.dedup();
        let slot: BTreeMap<i64, usize> = times.iter().enumerate().map(|(k, t)| (*t, k)).collect();
        let periods = times.len();
        let n = subjects.len();
        let (w, _) = covariate_matrix(&ds.take_rows(&subjects.members.iter().map(|m| m[0]).collect::<Vec<_>>()), &[
            ColumnRole::Baseline,
        ])?;
        let lcols = ds.with_role(ColumnRole::TimeVarying);
        let acol = ds.first_with_role(ColumnRole::Treatment);
        let ccol = ds.first_with_role(ColumnRole::Censoring);
        let ycol = ds.role_column(ColumnRole::Outcome)?;
        let mut covariates = vec![DMatrix::from_element(n, lcols.len(), f64::NAN); periods];
        let mut treatment = acol.map(|_| vec![vec![f64::NAN; n]; periods]);
        let mut censoring = ccol.map(|_| vec![vec![f64::NAN; n]; periods]);
        let mut outcome = vec![f64::NAN; n];
        for (i, rows) in subjects.members.iter().enumerate() {
            let mut seen = vec![false; periods];
            let mut last = None;
            for &r in rows {
                let tv = time.values[r].ok_or_else(|| Error::DomainViolation {
                    column: time.name.clone(),
                    row: r,
                    detail: "missing time index".into(),
                })? as i64;
                let t = slot[&tv];
                if seen[t] {
                    return Err(Error::DomainViolation {
                        column: time.name.clone(),
                        row: r,
                        detail: format!("duplicate period for subject {}", subjects.labels[i]),
                    });
                }
                seen[t] = true;
                for (j, c) in lcols.iter().enumerate() {
                    covariates[t][(i, j)] = c.values[r].unwrap_or(f64::NAN);
                }
                if let (Some(a), Some(col)) = (treatment.as_mut(), acol) {
                    a[t][i] = col.values[r].unwrap_or(f64::NAN);
                }
                if let (Some(c), Some(col)) = (censoring.as_mut(), ccol) {
                    c[t][i] = col.values[r].unwrap_or(f64::NAN);
                }
                if last.is_none_or(|(lt, _)| t > lt) {
                    last = Some((t, r));
                }
            }
            if let Some((_, r)) = last {
                outcome[i] = ycol.values[r].unwrap_or(f64::NAN);
            }
        }
        Panel::new(subjects.labels, w, covariates, treatment, censoring, outcome)
    }

    /// Subjects at the given positions, repeats allowed.
    pub fn take(&self, rows: &[usize]) -> Panel {
        let pick = |m: &DMatrix<f64>| DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)]);
        let pick_vec = |v: &Vec<Vec<f64>>| v.iter().map(|p| rows.iter().map(|&r| p[r]).collect()).collect();
        Panel {
            subjects: rows.iter().map(|&r| self.subjects[r].clone()).collect(),
            baseline: pick(&self.baseline),
            covariates: self.covariates.iter().map(pick).collect(),
            treatment: self.treatment.as_ref().map(pick_vec),
            censoring: self.censoring.as_ref().map(pick_vec),
            present: self.present.iter().map(|p| rows.iter().map(|&r| p[r]).collect()).collect(),
            outcome: rows.iter().map(|&r| self.outcome[r]).collect(),
        }
    }

    fn a(&self, t: usize, i: usize) -> Option<f64> {
        self.treatment.as_ref().map(|a| a[t][i])
    }

    fn c(&self, t: usize, i: usize) -> f64 {
        self.censoring.as_ref().map_or(0.0, |c| c[t][i])
    }

    /// History features for `rows`: W, L(0..=t), and treatments A(0..a_upto)
    /// (exclusive), with A(t) replaced by `a_now` when given.
    fn history(&self, rows: &[usize], t: usize, a_upto: usize, a_now: Option<f64>) -> DMatrix<f64> {
        let mut cols: Vec<Vec<f64>> = Vec::new();
        for j in 0..self.baseline.ncols() {
            cols.push(rows.iter().map(|&i| self.baseline[(i, j)]).collect());
        }
        for s in 0..=t {
            for j in 0..self.covariates[s].ncols() {
                cols.push(rows.iter().map(|&i| self.covariates[s][(i, j)]).collect());
            }
        }
        if self.treatment.is_some() {
            for s in 0..a_upto {
                cols.push(
                    rows.iter()
                        .map(|&i| match a_now {
                            Some(v) if s == t => v,
                            _ => self.a(s, i).unwrap_or(f64::NAN),
                        })
                        .collect(),
                );
            }
        }
        DMatrix::from_fn(rows.len(), cols.len(), |i, j| cols[j][i])
    }
}

/// Treatment and censoring models fitted once on every subject with a
/// record, shared across regimens.
#[derive(Debug, Clone)]
pub struct SharedPropensity {
    treatment: Vec<Option<NuisanceFit>>,
    censoring: Vec<Option<NuisanceFit>>,
    diagnostics: Diagnostics,
}

fn embed(fit_rows: &[usize], n: usize, values: impl Fn(usize) -> f64) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for &i in fit_rows {
        out[i] = values(i);
    }
    out
}

pub fn fit_propensities(panel: &Panel, cfg: &LtmleConfig, folds: &FoldPlan) -> Result<SharedPropensity> {
    let n = panel.n();
    let screen = cfg.nuisance.screening.then_some(cfg.nuisance.screen_alpha);
    let mut diag = Diagnostics::new();
    let mut treatment = Vec::new();
    let mut censoring = Vec::new();
    for t in 0..panel.periods() {
        let rows: Vec<usize> = (0..n).filter(|&i| panel.present[t][i]).collect();
        if rows.is_empty() {
            treatment.push(None);
            censoring.push(None);
            continue;
        }
        let x = panel.history(&(0..n).collect::<Vec<_>>(), t, t, None);
        if panel.treatment.is_some() {
            let y = embed(&rows, n, |i| panel.a(t, i).unwrap_or(0.0));
            let fit = fit_nuisance(&cfg.nuisance.propensity, &x, &y, &rows, folds, screen)?;
            diag.fallbacks += fit.fallbacks();
            treatment.push(Some(fit));
        } else {
            treatment.push(None);
        }
        if panel.censoring.is_some() {
            let xc = panel.history(&(0..n).collect::<Vec<_>>(), t, t + 1, None);
            let y = embed(&rows, n, |i| panel.c(t, i));
            // A known probability describes treatment assignment, not censoring.
            let method = match cfg.nuisance.propensity {
                NuisanceMethod::Known { .. } => NuisanceMethod::EmpiricalMean,
                ref m => m.clone(),
            };
            let fit = fit_nuisance(&method, &xc, &y, &rows, folds, screen)?;
            diag.fallbacks += fit.fallbacks();
            censoring.push(Some(fit));
        } else {
            censoring.push(None);
        }
    }
    Ok(SharedPropensity {
        treatment,
        censoring,
        diagnostics: diag,
    })
}

fn check_regimen(panel: &Panel, regimen: &Regimen) -> Result<()> {
    if regimen.treatment.len() != panel.periods() {
        return Err(Error::DimensionMismatch(format!(
            "regimen covers {} periods, data has {}",
            regimen.treatment.len(),
            panel.periods()
        )));
    }
    if regimen.treatment.iter().any(|v| *v > 1) {
        return Err(Error::Config("regimen treatments must be 0 or 1".into()));
    }
    Ok(())
}

fn ice_core(
    panel: &Panel,
    regimen: &Regimen,
    cfg: &LtmleConfig,
    folds: &FoldPlan,
    g: &SharedPropensity,
) -> Result<(f64, Vec<f64>, Vec<f64>, Diagnostics)> {
    check_regimen(panel, regimen)?;
    let n = panel.n();
    let periods = panel.periods();
    let screen = cfg.nuisance.screening.then_some(cfg.nuisance.screen_alpha);
    let mut diag = g.diagnostics.clone();
    let observed: Vec<f64> = panel.outcome.iter().copied().filter(|v| !v.is_nan()).collect();
    if observed.is_empty() {
        return Err(Error::NoMeasuredOutcomes { cluster: None });
    }
    let (_, rescale) = unit_rescale(&observed);
    diag.rescaled = rescale;
    let to_unit = |v: f64| match rescale {
        Some((mn, mx)) => (v - mn) / (mx - mn),
        None => v,
    };

    // Risk sets: at[t] = regimen-consistent and uncensored before t; follows
    // additionally matches a(t) and stays uncensored at t.
    let mut at = vec![vec![false; n]; periods];
    let mut follows = vec![vec![false; n]; periods];
    for i in 0..n {
        let mut ok = true;
        for t in 0..periods {
            at[t][i] = ok && panel.present[t][i];
            let matches = panel.a(t, i).is_none_or(|a| a == regimen.treatment[t] as f64);
            follows[t][i] = at[t][i] && matches && panel.c(t, i) == 0.0;
            ok = follows[t][i];
        }
    }

    // Cumulative probability of following the regimen, counterfactual at t.
    let mut cum = vec![1.0; n];
    let mut weights_cf: Vec<Vec<f64>> = Vec::with_capacity(periods);
    let mut raw_min = f64::INFINITY;
    let mut raw_max = f64::NEG_INFINITY;
    for t in 0..periods {
        let rows: Vec<usize> = (0..n).filter(|&i| at[t][i]).collect();
        let mut h = vec![0.0; n];
        if !rows.is_empty() {
            let a_t = regimen.treatment[t] as f64;
            let ga = match &g.treatment[t] {
                Some(fit) => {
                    let (p, u) = fit.predict(&panel.history(&rows, t, t, None))?;
                    diag.unseen_strata += u;
                    p.iter().map(|p| if a_t == 1.0 { *p } else { 1.0 - p }).collect()
                }
                None => vec![1.0; rows.len()],
            };
            let gc = match &g.censoring[t] {
                Some(fit) => {
                    let (p, u) = fit.predict(&panel.history(&rows, t, t + 1, Some(a_t)))?;
                    diag.unseen_strata += u;
                    p.iter().map(|p| 1.0 - p).collect()
                }
                None => vec![1.0; rows.len()],
            };
            for (k, &i) in rows.iter().enumerate() {
                let step = ga[k] * gc[k];
                raw_min = raw_min.min(step);
                raw_max = raw_max.max(step);
                cum[i] *= step;
                let w = 1.0 / cum[i];
                h[i] = match cfg.weight_bound {
                    Some(b) if w > b => {
                        diag.truncated += 1;
                        b
                    }
                    _ => w,
                };
            }
        }
        weights_cf.push(h);
    }
    diag.min_propensity = diag.min_propensity.min(raw_min);
    diag.max_propensity = diag.max_propensity.max(raw_max);
    if raw_min < crate::tmle::POSITIVITY_FLAG {
        diag.positivity_flag = true;
    }

    let pooled = mean(&observed.iter().map(|v| to_unit(*v)).collect::<Vec<_>>());
    let mut next: Vec<f64> = (0..n)
        .map(|i| if follows[periods - 1][i] { to_unit(panel.outcome[i]) } else { 0.0 })
        .collect();
    let mut ic = vec![0.0; n];
    let mut epsilons = vec![0.0; periods];
    let all: Vec<usize> = (0..n).collect();
    for t in (0..periods).rev() {
        let pred_rows: Vec<usize> = (0..n).filter(|&i| at[t][i]).collect();
        let fit_rows: Vec<usize> = (0..n).filter(|&i| follows[t][i]).collect();
        let mut q = vec![0.0; n];
        if fit_rows.is_empty() {
            diag.empty_risk_sets.push(t);
            diag.notes.push(format!("no regimen-consistent subjects at period {t}; pooled outcome mean used"));
            for &i in &pred_rows {
                q[i] = pooled;
            }
        } else if !pred_rows.is_empty() {
            let x = panel.history(&all, t, 0, None);
            let fit = fit_nuisance(&cfg.nuisance.outcome, &x, &next, &fit_rows, folds, screen)?;
            diag.fallbacks += fit.fallbacks();
            let (p, u) = fit.predict(&panel.history(&pred_rows, t, 0, None))?;
            diag.unseen_strata += u;
            for (k, &i) in pred_rows.iter().enumerate() {
                q[i] = p[k];
            }
        }
        let h_obs: Vec<f64> = (0..n).map(|i| if follows[t][i] { weights_cf[t][i] } else { 0.0 }).collect();
        let (eps, converged) = fit_fluctuation(&q, &h_obs, &next);
        diag.converged &= converged;
        epsilons[t] = eps;
        let mut star = vec![0.0; n];
        for &i in &pred_rows {
            star[i] = fluctuated(q[i], eps, weights_cf[t][i]);
            debug_assert!((0.0..=1.0).contains(&star[i]));
        }
        for &i in &fit_rows {
            ic[i] += h_obs[i] * (next[i] - star[i]);
        }
        next = star;
    }
    let psi_unit = mean(&next);
    for i in 0..n {
        ic[i] += next[i] - psi_unit;
    }
    let (psi, ic) = match rescale {
        Some((mn, mx)) => (mn + psi_unit * (mx - mn), ic.iter().map(|v| v * (mx - mn)).collect()),
        None => (psi_unit, ic),
    };
    Ok((psi, ic, epsilons, diag))
}

/// Counterfactual mean under `regimen` with influence-curve inference.
pub fn ice_mean(panel: &Panel, regimen: &Regimen, cfg: &LtmleConfig, folds: &FoldPlan) -> Result<EstimateResult> {
    cfg.nuisance.validate()?;
    check_folds(panel, folds)?;
    let g = fit_propensities(panel, cfg, folds)?;
    let (psi, ic, eps, diag) = ice_core(panel, regimen, cfg, folds, &g)?;
    Ok(EstimateResult::from_ic(psi, Scale::Mean, ic, eps, diag))
}

fn check_folds(panel: &Panel, folds: &FoldPlan) -> Result<()> {
    if folds.n != panel.n() {
        return Err(Error::DimensionMismatch(format!(
            "fold plan covers {} subjects, panel has {}",
            folds.n,
            panel.n()
        )));
    }
    Ok(())
}

/// Risk difference between two regimens on shared propensity fits, IC-based.
pub fn contrast_point(
    panel: &Panel,
    regimen1: &Regimen,
    regimen0: &Regimen,
    cfg: &LtmleConfig,
    folds: &FoldPlan,
) -> Result<EstimateResult> {
    cfg.nuisance.validate()?;
    check_folds(panel, folds)?;
    let g = fit_propensities(panel, cfg, folds)?;
    let (p1, ic1, e1, d1) = ice_core(panel, regimen1, cfg, folds, &g)?;
    let (p0, ic0, e0, d0) = ice_core(panel, regimen0, cfg, folds, &g)?;
    let ic: Vec<f64> = ic1.iter().zip(&ic0).map(|(a, b)| a - b).collect();
    let mut diag = d1;
    diag.merge(&d0);
    let mut eps = e1;
    eps.extend(e0);
    Ok(EstimateResult::from_ic(p1 - p0, Scale::Difference, ic, eps, diag))
}

/// Risk difference with the configured variance method. The bootstrap
/// refits everything, including a fresh fold plan, on each replicate.
pub fn ltmle_contrast(
    panel: &Panel,
    regimen1: &Regimen,
    regimen0: &Regimen,
    cfg: &LtmleConfig,
    folds: &FoldPlan,
    stream: &SeededStream,
) -> Result<EstimateResult> {
    cfg.validate()?;
    let mut point = contrast_point(panel, regimen1, regimen0, cfg, folds)?;
    if let VarianceMethod::Bootstrap { replicates } = cfg.variance {
        let v = folds.v;
        let boot = bootstrap_variance(panel.n(), replicates, stream, |rows, s| {
            let sample = panel.take(rows);
            let plan = make_folds(rows.len(), v, s, None, Some(rows))?;
            Ok(contrast_point(&sample, regimen1, regimen0, cfg, &plan)?.psi)
        })?;
        point.set_variance(boot.variance);
        if boot.failed > 0 {
            point
                .diagnostics
                .notes
                .push(format!("{} of {} bootstrap replicates failed", boot.failed, boot.replicates));
        }
    }
    Ok(point)
}

/// Regimen mean with the configured variance method.
pub fn ltmle_mean(
    panel: &Panel,
    regimen: &Regimen,
    cfg: &LtmleConfig,
    folds: &FoldPlan,
    stream: &SeededStream,
) -> Result<EstimateResult> {
    cfg.validate()?;
    let mut point = ice_mean(panel, regimen, cfg, folds)?;
    if let VarianceMethod::Bootstrap { replicates } = cfg.variance {
        let v = folds.v;
        let boot = bootstrap_variance(panel.n(), replicates, stream, |rows, s| {
            let sample = panel.take(rows);
            let plan = make_folds(rows.len(), v, s, None, Some(rows))?;
            Ok(ice_mean(&sample, regimen, cfg, &plan)?.psi)
        })?;
        point.set_variance(boot.variance);
    }
    Ok(point)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub variance: f64,
    pub se: f64,
    pub replicates: usize,
    pub failed: usize,
    pub estimates: Vec<f64>,
}

impl BootstrapResult {
    /// Wald interval around `psi` using the bootstrap SE.
    pub fn wald_ci(&self, psi: f64) -> (f64, f64) {
        (psi - Z_95 * self.se, psi + Z_95 * self.se)
    }

    /// 2.5% and 97.5% empirical quantiles of the replicate estimates.
    pub fn percentile_ci(&self) -> (f64, f64) {
        let mut v = self.estimates.clone();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let h = (v.len() - 1) as f64 * p;
            let lo = h.floor() as usize;
            let hi = h.ceil() as usize;
            v[lo] + (h - lo as f64) * (v[hi] - v[lo])
        };
        (q(0.025), q(0.975))
    }
}

/// Nonparametric bootstrap over `n_units` independent units. The estimator
/// receives the drawn unit positions and a replicate-specific stream.
/// Fails when more than 10% of replicates fail.
pub fn bootstrap_variance<F>(n_units: usize, replicates: usize, stream: &SeededStream, estimator: F) -> Result<BootstrapResult>
where
    F: Fn(&[usize], &SeededStream) -> Result<f64>,
{
    if n_units == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut estimates = Vec::with_capacity(replicates);
    let mut failed = 0;
    for b in 0..replicates {
        let s = stream.derive(b as u64);
        let rows = crate::data::resample_indices(n_units, n_units, &s.derive(0));
        match estimator(&rows, &s.derive(1)) {
            Ok(v) if v.is_finite() => estimates.push(v),
            _ => failed += 1,
        }
    }
    if failed * 10 > replicates || estimates.len() < 2 {
        return Err(Error::BootstrapFailed {
            failed,
            total: replicates,
        });
    }
    let variance = sample_variance(&estimates);
    Ok(BootstrapResult {
        variance,
        se: variance.sqrt(),
        replicates,
        failed,
        estimates,
    })
}
