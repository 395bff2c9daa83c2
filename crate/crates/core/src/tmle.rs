//! Point-treatment TMLE: the average treatment effect and the
//! missingness-adjusted mean, plus the shared targeting and influence-curve
//! machinery used by the longitudinal and two-stage estimators.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{ColumnRole, Dataset};
use crate::error::{Error, Result};
use crate::learners::{
    fit_learner, screen_covariates, select_columns, select_rows, Family, FittedLearner, LearnerSpec,
    StratifiedMeans, SCREEN_ALPHA,
};
use crate::stats::{expit, logit, mean, sample_variance, wald_p_value, Z_95};
use crate::superlearner::{
    fit_super_learner_screened, EnsembleMode, FoldPlan, Loss, SuperLearnerFit,
};

pub const DEFAULT_TRUNCATION: (f64, f64) = (0.025, 0.975);
/// Raw propensities below this are reported as practical positivity
/// violations.
pub const POSITIVITY_FLAG: f64 = 0.025;
const FLUCT_MAX_ITER: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuperLearnerConfig {
    pub library: Vec<LearnerSpec>,
    #[serde(default = "default_mode")]
    pub mode: EnsembleMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<Loss>,
}

fn default_mode() -> EnsembleMode {
    EnsembleMode::Discrete
}

impl SuperLearnerConfig {
    /// Small deterministic default library.
    pub fn default_library() -> Self {
        SuperLearnerConfig {
            library: vec![
                LearnerSpec::intercept_only(Family::Binomial),
                LearnerSpec::main_terms(Family::Binomial),
                LearnerSpec::ridge(1.0, Family::Binomial),
                LearnerSpec::ridge_interactions(1.0, Family::Binomial),
            ],
            mode: EnsembleMode::Discrete,
            loss: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum NuisanceMethod {
    /// Outcome regression: treatment-arm mean (or plain mean where no arm
    /// applies). Propensity: marginal proportion.
    EmpiricalMean,
    /// Exact cell means over distinct covariate patterns.
    Saturated,
    /// Known probability, e.g. a randomization probability.
    Known { probability: f64 },
    Parametric { learner: LearnerSpec },
    SuperLearner(SuperLearnerConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceConfig {
    pub outcome: NuisanceMethod,
    pub propensity: NuisanceMethod,
    /// Likelihood-ratio pre-screening for both regressions.
    #[serde(default)]
    pub screening: bool,
    #[serde(default = "default_alpha")]
    pub screen_alpha: f64,
    /// Propensity truncation bounds; `None` disables truncation.
    #[serde(default = "default_truncation")]
    pub truncation: Option<(f64, f64)>,
}

fn default_alpha() -> f64 {
    SCREEN_ALPHA
}

fn default_truncation() -> Option<(f64, f64)> {
    Some(DEFAULT_TRUNCATION)
}

impl NuisanceConfig {
    pub fn new(outcome: NuisanceMethod, propensity: NuisanceMethod) -> Self {
        NuisanceConfig {
            outcome,
            propensity,
            screening: false,
            screen_alpha: SCREEN_ALPHA,
            truncation: Some(DEFAULT_TRUNCATION),
        }
    }

    pub fn saturated() -> Self {
        NuisanceConfig::new(NuisanceMethod::Saturated, NuisanceMethod::Saturated).without_truncation()
    }

    pub fn parametric() -> Self {
        let l = LearnerSpec::main_terms(Family::Binomial);
        NuisanceConfig::new(
            NuisanceMethod::Parametric { learner: l },
            NuisanceMethod::Parametric { learner: l },
        )
    }

    pub fn super_learner() -> Self {
        NuisanceConfig::new(
            NuisanceMethod::SuperLearner(SuperLearnerConfig::default_library()),
            NuisanceMethod::SuperLearner(SuperLearnerConfig::default_library()),
        )
    }

    pub fn without_truncation(mut self) -> Self {
        self.truncation = None;
        self
    }

    pub fn with_screening(mut self, on: bool) -> Self {
        self.screening = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let Some((l, u)) = self.truncation {
            check_bounds(l, u)?;
        }
        for m in [&self.outcome, &self.propensity] {
            match m {
                NuisanceMethod::Known { probability } if !(*probability > 0.0 && *probability < 1.0) => {
                    return Err(Error::Config(format!("known probability {probability} outside (0,1)")));
                }
                NuisanceMethod::Parametric { learner } => learner.validate()?,
                NuisanceMethod::SuperLearner(c) => {
                    if c.library.is_empty() {
                        return Err(Error::Config("super learner library is empty".into()));
                    }
                    for l in &c.library {
                        l.validate()?;
                    }
                }
                _ => {}
            }
        }
        if !(self.screen_alpha > 0.0 && self.screen_alpha < 1.0) {
            return Err(Error::Config("screening alpha must lie in (0,1)".into()));
        }
        Ok(())
    }

    fn screen(&self) -> Option<f64> {
        self.screening.then_some(self.screen_alpha)
    }
}

fn check_bounds(l: f64, u: f64) -> Result<()> {
    if l > 0.0 && l < u && u < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidBounds { lower: l, upper: u })
    }
}

/// Clamps every score into `[lower, upper]`; identity when `bounds` is `None`.
pub fn truncate_scores(g: &[f64], bounds: Option<(f64, f64)>) -> Result<Vec<f64>> {
    match bounds {
        None => Ok(g.to_vec()),
        Some((l, u)) => {
            check_bounds(l, u)?;
            Ok(g.iter().map(|v| v.clamp(l, u)).collect())
        }
    }
}

/// A fitted nuisance regression of any method.
#[derive(Debug, Clone)]
pub enum NuisanceFit {
    Constant(f64),
    Stratified(StratifiedMeans),
    Learner {
        fit: FittedLearner,
        columns: Option<Vec<usize>>,
    },
    Ensemble(Box<SuperLearnerFit>),
}

impl NuisanceFit {
    /// Predictions and number of rows with an unseen covariate pattern.
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<(Vec<f64>, usize)> {
        match self {
            NuisanceFit::Constant(c) => Ok((vec![*c; x.nrows()], 0)),
            NuisanceFit::Stratified(s) => s.predict(x),
            NuisanceFit::Learner { fit, columns } => {
                let p = match columns {
                    Some(c) => fit.predict(&select_columns(x, c))?,
                    None => fit.predict(x)?,
                };
                Ok((p, 0))
            }
            NuisanceFit::Ensemble(sl) => Ok((sl.predict(x)?, 0)),
        }
    }

    pub fn fallbacks(&self) -> usize {
        match self {
            NuisanceFit::Learner { fit, .. } => fit.fallback as usize,
            NuisanceFit::Ensemble(sl) => sl.fallbacks,
            _ => 0,
        }
    }
}

/// Fits `method` for a [0,1]-valued response on the given rows.
/// `folds` covers all rows of `x`; it is restricted to `rows` for super
/// learning.
pub fn fit_nuisance(
    method: &NuisanceMethod,
    x: &DMatrix<f64>,
    y: &[f64],
    rows: &[usize],
    folds: &FoldPlan,
    screen: Option<f64>,
) -> Result<NuisanceFit> {
    if rows.is_empty() {
        return Err(Error::TooFewUnits {
            needed: 1,
            available: 0,
        });
    }
    let yr: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
    let fit = match method {
        NuisanceMethod::EmpiricalMean => NuisanceFit::Constant(mean(&yr)),
        NuisanceMethod::Known { probability } => NuisanceFit::Constant(*probability),
        NuisanceMethod::Saturated => {
            NuisanceFit::Stratified(StratifiedMeans::fit(&select_rows(x, rows), &yr, None)?)
        }
        NuisanceMethod::Parametric { learner } => {
            let xr = select_rows(x, rows);
            match screen {
                Some(alpha) if xr.ncols() > 0 => {
                    let cols = screen_covariates(&xr, &yr, learner.family, alpha);
                    let fit = fit_learner(learner, &select_columns(&xr, &cols), &yr, None, None)?;
                    NuisanceFit::Learner {
                        fit,
                        columns: Some(cols),
                    }
                }
                _ => NuisanceFit::Learner {
                    fit: fit_learner(learner, &xr, &yr, None, None)?,
                    columns: None,
                },
            }
        }
        NuisanceMethod::SuperLearner(cfg) => {
            let xr = select_rows(x, rows);
            let plan = folds.restrict(rows);
            let family = cfg.library.first().map(|l| l.family).unwrap_or(Family::Binomial);
            let loss = cfg.loss.unwrap_or(Loss::for_family(family));
            NuisanceFit::Ensemble(Box::new(fit_super_learner_screened(
                &cfg.library,
                &xr,
                &yr,
                &plan,
                loss,
                cfg.mode,
                screen,
            )?))
        }
    };
    Ok(fit)
}

/// Applies a fitted fluctuation to one initial prediction. Predictions at
/// exactly 0 or 1 are fixed points of the logistic submodel.
pub fn fluctuated(q: f64, epsilon: f64, h: f64) -> f64 {
    if epsilon == 0.0 || h == 0.0 || q <= 0.0 || q >= 1.0 {
        q
    } else {
        expit(logit(q) + epsilon * h)
    }
}

/// Maximum-likelihood fit of the intercept-free logistic submodel
/// `logit q*(eps) = logit q + eps * h`, i.e. the root of
/// `sum_i h_i (y_i - q*_i(eps)) = 0`. Returns `(epsilon, converged)`.
pub fn fit_fluctuation(q: &[f64], h: &[f64], y: &[f64]) -> (f64, bool) {
    let score = |eps: f64| -> (f64, f64) {
        let mut s = 0.0;
        let mut d = 0.0;
        for i in 0..q.len() {
            if h[i] == 0.0 {
                continue;
            }
            let qs = fluctuated(q[i], eps, h[i]);
            s += h[i] * (y[i] - qs);
            d += h[i] * h[i] * qs * (1.0 - qs);
        }
        (s, d)
    };
    let scale: f64 = h.iter().map(|v| v.abs()).sum::<f64>().max(1.0);
    let tol = 1e-13 * scale;
    let (s0, d0) = score(0.0);
    if s0.abs() <= tol || d0 <= 0.0 {
        return (0.0, s0.abs() <= tol || d0 <= 0.0);
    }
    // The score is non-increasing in eps; bracket the root, then safeguarded
    // Newton.
    let (mut lo, mut hi) = if s0 > 0.0 { (0.0, f64::NAN) } else { (f64::NAN, 0.0) };
    let mut step = 1.0;
    for _ in 0..60 {
        if s0 > 0.0 {
            let (s, _) = score(step);
            if s <= 0.0 {
                hi = step;
                break;
            }
            lo = step;
        } else {
            let (s, _) = score(-step);
            if s >= 0.0 {
                lo = -step;
                break;
            }
            hi = -step;
        }
        step *= 2.0;
    }
    if lo.is_nan() || hi.is_nan() {
        return (if s0 > 0.0 { lo } else { hi }, false);
    }
    let mut eps = 0.0f64.clamp(lo, hi);
    for _ in 0..FLUCT_MAX_ITER {
        let (s, d) = score(eps);
        if s.abs() <= tol {
            return (eps, true);
        }
        if s > 0.0 {
            lo = eps;
        } else {
            hi = eps;
        }
        let newton = if d > 0.0 { eps + s / d } else { f64::NAN };
        let next = if newton.is_finite() && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if (next - eps).abs() <= 1e-15 * eps.abs().max(1.0) {
            return (next, score(next).0.abs() <= tol.max(1e-9 * scale));
        }
        eps = next;
    }
    let ok = score(eps).0.abs() <= 1e-9 * scale;
    (eps, ok)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum VarianceMethod {
    #[default]
    InfluenceCurve,
    Bootstrap { replicates: usize },
    /// Held-out influence-curve variance over the adjustment-selection folds.
    CrossValidatedIc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    /// A single mean; Wald tests against 0.
    Mean,
    Difference,
    /// Ratio with inference on the log scale.
    Ratio,
}

impl Scale {
    pub fn null_value(self) -> f64 {
        match self {
            Scale::Ratio => 1.0,
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub min_propensity: f64,
    pub max_propensity: f64,
    pub truncated: usize,
    pub fallbacks: usize,
    pub unseen_strata: usize,
    pub positivity_flag: bool,
    pub converged: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub empty_risk_sets: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rescaled: Option<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl Diagnostics {
    fn record_propensity(&mut self, raw: &[f64], used: &[f64]) {
        let (mn, mx) = raw
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
        self.min_propensity = self.min_propensity.min(mn);
        self.max_propensity = self.max_propensity.max(mx);
        self.truncated += raw.iter().zip(used).filter(|(a, b)| a != b).count();
        if mn < POSITIVITY_FLAG {
            self.positivity_flag = true;
        }
    }

    pub fn new() -> Self {
        Diagnostics {
            min_propensity: f64::INFINITY,
            max_propensity: f64::NEG_INFINITY,
            converged: true,
            ..Default::default()
        }
    }

    pub fn merge(&mut self, other: &Diagnostics) {
        self.min_propensity = self.min_propensity.min(other.min_propensity);
        self.max_propensity = self.max_propensity.max(other.max_propensity);
        self.truncated += other.truncated;
        self.fallbacks += other.fallbacks;
        self.unseen_strata += other.unseen_strata;
        self.positivity_flag |= other.positivity_flag;
        self.converged &= other.converged;
        self.empty_risk_sets.extend(other.empty_risk_sets.iter().copied());
        self.notes.extend(other.notes.iter().cloned());
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateResult {
    pub psi: f64,
    pub scale: Scale,
    /// Influence-curve values per independent unit (log scale for ratios).
    pub ic: Vec<f64>,
    /// Variance of the estimator (log scale for ratios).
    pub variance: f64,
    pub se: f64,
    /// 95% Wald interval on the natural scale.
    pub ci: (f64, f64),
    pub p_value: f64,
    pub epsilon: Vec<f64>,
    pub diagnostics: Diagnostics,
}

impl EstimateResult {
    /// Assembles a result with variance `var(ic) / n`.
    pub fn from_ic(psi: f64, scale: Scale, ic: Vec<f64>, epsilon: Vec<f64>, diagnostics: Diagnostics) -> Self {
        let variance = if ic.len() >= 2 {
            sample_variance(&ic) / ic.len() as f64
        } else {
            f64::NAN
        };
        let mut r = EstimateResult {
            psi,
            scale,
            ic,
            variance,
            se: 0.0,
            ci: (f64::NAN, f64::NAN),
            p_value: f64::NAN,
            epsilon,
            diagnostics,
        };
        r.set_variance(variance);
        r
    }

    /// Replaces the variance and recomputes SE, interval and p-value.
    pub fn set_variance(&mut self, variance: f64) {
        self.variance = variance;
        self.se = variance.max(0.0).sqrt();
        match self.scale {
            Scale::Ratio => {
                let l = self.psi.ln();
                self.ci = ((l - Z_95 * self.se).exp(), (l + Z_95 * self.se).exp());
                self.p_value = wald_p_value(l, 0.0, self.se);
            }
            _ => {
                self.ci = (self.psi - Z_95 * self.se, self.psi + Z_95 * self.se);
                self.p_value = wald_p_value(self.psi, self.scale.null_value(), self.se);
            }
        }
    }

    pub fn ic_mean(&self) -> f64 {
        mean(&self.ic)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IcVariance {
    pub variance: f64,
    pub se: f64,
    pub half_width: f64,
}

/// `var(ic) / n_independent` with the matching SE and 95% half-width.
pub fn ic_variance(ic: &[f64], n_independent: usize) -> Result<IcVariance> {
    if ic.len() < 2 || n_independent == 0 {
        return Err(Error::TooFewUnits {
            needed: 2,
            available: ic.len().min(n_independent),
        });
    }
    let variance = sample_variance(ic) / n_independent as f64;
    let se = variance.sqrt();
    Ok(IcVariance {
        variance,
        se,
        half_width: Z_95 * se,
    })
}

/// Collapses individual IC values to one value per cluster: the cluster
/// mean times `n_clusters * n_j / n`, so that the cluster values average to
/// the individual-level mean.
pub fn aggregate_ic_by_cluster(ic: &[f64], cluster_of: &[usize], n_clusters: usize) -> Vec<f64> {
    let n = ic.len() as f64;
    let mut sums = vec![0.0; n_clusters];
    for (v, &c) in ic.iter().zip(cluster_of) {
        sums[c] += v;
    }
    sums.iter().map(|s| s * n_clusters as f64 / n).collect()
}

/// Maps an outcome into [0,1] when needed; returns the transformed values
/// and the `(min, max)` used.
pub(crate) fn unit_rescale(y: &[f64]) -> (Vec<f64>, Option<(f64, f64)>) {
    let (mn, mx) = y
        .iter()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    if mn >= 0.0 && mx <= 1.0 {
        return (y.to_vec(), None);
    }
    let r = mx - mn;
    (y.iter().map(|v| (v - mn) / r).collect(), Some((mn, mx)))
}

fn append_column(x: &DMatrix<f64>, col: &[f64]) -> DMatrix<f64> {
    let (n, p) = x.shape();
    DMatrix::from_fn(n, p + 1, |i, j| if j < p { x[(i, j)] } else { col[i] })
}

/// Covariate matrix from every column with the given roles, in dataset order.
pub fn covariate_matrix(ds: &Dataset, roles: &[ColumnRole]) -> Result<(DMatrix<f64>, Vec<String>)> {
    let cols: Vec<_> = ds.columns().iter().filter(|c| roles.contains(&c.role)).collect();
    let n = ds.n_rows();
    let mut x = DMatrix::zeros(n, cols.len());
    for (j, c) in cols.iter().enumerate() {
        for i in 0..n {
            x[(i, j)] = c.values[i].ok_or_else(|| Error::DomainViolation {
                column: c.name.clone(),
                row: i,
                detail: "missing covariate value".into(),
            })?;
        }
    }
    Ok((x, cols.iter().map(|c| c.name.clone()).collect()))
}

fn observed(ds: &Dataset, role: ColumnRole) -> Result<Vec<f64>> {
    let c = ds.role_column(role)?;
    c.values
        .iter()
        .enumerate()
        .map(|(row, v)| {
            v.ok_or_else(|| Error::DomainViolation {
                column: c.name.clone(),
                row,
                detail: "missing value".into(),
            })
        })
        .collect()
}

/// ATE by TMLE on a point-treatment dataset (baseline covariates, binary
/// treatment, fully observed outcome).
pub fn tmle_ate(data: &Dataset, cfg: &NuisanceConfig, folds: &FoldPlan) -> Result<EstimateResult> {
    let (w, _) = covariate_matrix(data, &[ColumnRole::Baseline])?;
    let a = observed(data, ColumnRole::Treatment)?;
    let y = observed(data, ColumnRole::Outcome)?;
    tmle_ate_arrays(&w, &a, &y, cfg, folds)
}

/// [`tmle_ate`] on raw arrays.
pub fn tmle_ate_arrays(
    w: &DMatrix<f64>,
    a: &[f64],
    y: &[f64],
    cfg: &NuisanceConfig,
    folds: &FoldPlan,
) -> Result<EstimateResult> {
    let n = y.len();
    if a.len() != n || w.nrows() != n || folds.n != n {
        return Err(Error::DimensionMismatch(format!(
            "w has {} rows, a {}, y {n}, folds {}",
            w.nrows(),
            a.len(),
            folds.n
        )));
    }
    cfg.validate()?;
    let mut diag = Diagnostics::new();
    if y.iter().all(|v| *v == y[0]) {
        diag.notes.push("outcome is constant".into());
        return Ok(EstimateResult::from_ic(0.0, Scale::Difference, vec![0.0; n], vec![0.0], diag));
    }
    if a.iter().all(|v| *v == a[0]) {
        return Err(Error::PositivityCollapse(format!(
            "treatment is constant ({}) in all {n} units",
            a[0]
        )));
    }
    let (ys, rescale) = unit_rescale(y);
    diag.rescaled = rescale;
    let all: Vec<usize> = (0..n).collect();
    let screen = cfg.screen();

    let gfit = fit_nuisance(&cfg.propensity, w, a, &all, folds, screen)?;
    let (g_raw, unseen_g) = gfit.predict(w)?;
    let g1 = truncate_scores(&g_raw, cfg.truncation)?;
    diag.record_propensity(&g_raw, &g1);
    diag.fallbacks += gfit.fallbacks();
    diag.unseen_strata += unseen_g;

    let ones = vec![1.0; n];
    let zeros = vec![0.0; n];
    let (qa, q1, q0) = match &cfg.outcome {
        NuisanceMethod::EmpiricalMean => {
            let xa = DMatrix::from_column_slice(n, 1, a);
            let s = StratifiedMeans::fit(&xa, &ys, None)?;
            let qa = s.predict(&xa)?.0;
            let q1 = s.predict(&DMatrix::from_column_slice(n, 1, &ones))?.0;
            let q0 = s.predict(&DMatrix::from_column_slice(n, 1, &zeros))?.0;
            (qa, q1, q0)
        }
        method => {
            let xa = append_column(w, a);
            let qfit = fit_nuisance(method, &xa, &ys, &all, folds, screen)?;
            diag.fallbacks += qfit.fallbacks();
            let (qa, u0) = qfit.predict(&xa)?;
            let (q1, u1) = qfit.predict(&append_column(w, &ones))?;
            let (q0, u2) = qfit.predict(&append_column(w, &zeros))?;
            diag.unseen_strata += u0 + u1 + u2;
            (qa, q1, q0)
        }
    };
    let h1: Vec<f64> = g1.iter().map(|g| 1.0 / g).collect();
    let h0: Vec<f64> = g1.iter().map(|g| -1.0 / (1.0 - g)).collect();
    let ha: Vec<f64> = (0..n).map(|i| if a[i] == 1.0 { h1[i] } else { h0[i] }).collect();
    let (eps, converged) = fit_fluctuation(&qa, &ha, &ys);
    diag.converged = converged;
    let qa_s: Vec<f64> = (0..n).map(|i| fluctuated(qa[i], eps, ha[i])).collect();
    let q1_s: Vec<f64> = (0..n).map(|i| fluctuated(q1[i], eps, h1[i])).collect();
    let q0_s: Vec<f64> = (0..n).map(|i| fluctuated(q0[i], eps, h0[i])).collect();
    let psi = mean(&(0..n).map(|i| q1_s[i] - q0_s[i]).collect::<Vec<_>>());
    let mut ic: Vec<f64> = (0..n)
        .map(|i| ha[i] * (ys[i] - qa_s[i]) + q1_s[i] - q0_s[i] - psi)
        .collect();
    let mut psi = psi;
    if let Some((mn, mx)) = rescale {
        let r = mx - mn;
        psi *= r;
        ic.iter_mut().for_each(|v| *v *= r);
    }
    Ok(EstimateResult::from_ic(psi, Scale::Difference, ic, vec![eps], diag))
}

/// Missingness-adjusted mean `E[E(Y | Δ=1, W, M)]` by TMLE.
pub fn tmle_missing_mean(data: &Dataset, cfg: &NuisanceConfig, folds: &FoldPlan) -> Result<EstimateResult> {
    let (x, _) = covariate_matrix(data, &[ColumnRole::Baseline, ColumnRole::TimeVarying])?;
    let delta = observed(data, ColumnRole::Measurement)?;
    let y = data.role_column(ColumnRole::Outcome)?.dense();
    tmle_missing_mean_arrays(&x, &delta, &y, cfg, folds)
}

/// [`tmle_missing_mean`] on raw arrays; `y` holds NaN where `delta == 0`.
pub fn tmle_missing_mean_arrays(
    x: &DMatrix<f64>,
    delta: &[f64],
    y: &[f64],
    cfg: &NuisanceConfig,
    folds: &FoldPlan,
) -> Result<EstimateResult> {
    let n = delta.len();
    if y.len() != n || x.nrows() != n || folds.n != n {
        return Err(Error::DimensionMismatch(format!(
            "x has {} rows, delta {n}, y {}, folds {}",
            x.nrows(),
            y.len(),
            folds.n
        )));
    }
    cfg.validate()?;
    let measured: Vec<usize> = (0..n).filter(|&i| delta[i] == 1.0).collect();
    if measured.is_empty() {
        return Err(Error::NoMeasuredOutcomes { cluster: None });
    }
    if let Some(&i) = measured.iter().find(|&&i| !y[i].is_finite()) {
        return Err(Error::DomainViolation {
            column: "outcome".into(),
            row: i,
            detail: "measured outcome is missing".into(),
        });
    }
    let mut diag = Diagnostics::new();
    let ym: Vec<f64> = measured.iter().map(|&i| y[i]).collect();
    let p_measured = measured.len() as f64 / n as f64;
    if ym.iter().all(|v| *v == ym[0]) {
        diag.notes.push("measured outcome is constant".into());
        return Ok(EstimateResult::from_ic(ym[0], Scale::Mean, vec![0.0; n], vec![0.0], diag));
    }
    let (ys_m, rescale) = unit_rescale(&ym);
    diag.rescaled = rescale;
    let mut ys = vec![0.0; n];
    for (k, &i) in measured.iter().enumerate() {
        ys[i] = ys_m[k];
    }
    let back = |v: f64| match rescale {
        Some((mn, mx)) => v * (mx - mn),
        None => v,
    };
    if cfg.outcome == NuisanceMethod::EmpiricalMean {
        let psi_u = mean(&ys_m);
        let ic: Vec<f64> = (0..n)
            .map(|i| back(delta[i] / p_measured * (ys[i] - psi_u)))
            .collect();
        let psi = match rescale {
            Some((mn, mx)) => mn + psi_u * (mx - mn),
            None => psi_u,
        };
        return Ok(EstimateResult::from_ic(psi, Scale::Mean, ic, vec![0.0], diag));
    }
    let all: Vec<usize> = (0..n).collect();
    let screen = cfg.screen();
    let gfit = fit_nuisance(&cfg.propensity, x, delta, &all, folds, screen)?;
    let (g_raw, unseen_g) = gfit.predict(x)?;
    let g = truncate_scores(&g_raw, cfg.truncation)?;
    diag.record_propensity(&g_raw, &g);
    diag.fallbacks += gfit.fallbacks();
    diag.unseen_strata += unseen_g;
    if g.iter().any(|v| *v <= 0.0) || gfit.fallbacks() > 0 {
        diag.positivity_flag = true;
        diag.notes.push("measurement model degenerate or separated".into());
    }

    let qfit = fit_nuisance(&cfg.outcome, x, &ys, &measured, folds, screen)?;
    diag.fallbacks += qfit.fallbacks();
    let (q, unseen_q) = qfit.predict(x)?;
    diag.unseen_strata += unseen_q;
    let h: Vec<f64> = (0..n).map(|i| if delta[i] == 1.0 { 1.0 / g[i] } else { 0.0 }).collect();
    let (eps, converged) = fit_fluctuation(&q, &h, &ys);
    diag.converged = converged;
    let q1_s: Vec<f64> = (0..n)
        .map(|i| fluctuated(q[i], eps, if g[i] > 0.0 { 1.0 / g[i] } else { 0.0 }))
        .collect();
    let psi_u = mean(&q1_s);
    let ic: Vec<f64> = (0..n)
        .map(|i| back(h[i] * (ys[i] - q1_s[i]) + q1_s[i] - psi_u))
        .collect();
    let psi = match rescale {
        Some((mn, mx)) => mn + psi_u * (mx - mn),
        None => psi_u,
    };
    Ok(EstimateResult::from_ic(psi, Scale::Mean, ic, vec![eps], diag))
}
