//! Base learners for nuisance regressions: intercept-only, main-terms and
//! ridge GLMs (optionally with pairwise interactions), fitted by penalized
//! IRLS, plus univariate likelihood-ratio screening.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{chi_square_sf, expit};

/// Binomial predictions are bounded into `[PRED_BOUND, 1 - PRED_BOUND]`.
pub const PRED_BOUND: f64 = 1e-4;
pub const MAX_ITER: usize = 100;
pub const TOL: f64 = 1e-8;
/// Linear predictors beyond this magnitude in an unpenalized fit indicate
/// (quasi-)separation.
const SEPARATION_ETA: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Binomial,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LearnerKind {
    InterceptOnly,
    GlmMainTerms,
    GlmRidge { lambda: f64 },
    GlmRidgeInteractions { lambda: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearnerSpec {
    #[serde(flatten)]
    pub kind: LearnerKind,
    pub family: Family,
}

impl LearnerSpec {
    pub fn new(kind: LearnerKind, family: Family) -> Self {
        LearnerSpec { kind, family }
    }

    pub fn intercept_only(family: Family) -> Self {
        Self::new(LearnerKind::InterceptOnly, family)
    }

    pub fn main_terms(family: Family) -> Self {
        Self::new(LearnerKind::GlmMainTerms, family)
    }

    pub fn ridge(lambda: f64, family: Family) -> Self {
        Self::new(LearnerKind::GlmRidge { lambda }, family)
    }

    pub fn ridge_interactions(lambda: f64, family: Family) -> Self {
        Self::new(LearnerKind::GlmRidgeInteractions { lambda }, family)
    }

    pub fn lambda(&self) -> f64 {
        match self.kind {
            LearnerKind::GlmRidge { lambda } | LearnerKind::GlmRidgeInteractions { lambda } => lambda,
            _ => 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.lambda();
        if !(l >= 0.0 && l.is_finite()) {
            return Err(Error::Config(format!("ridge penalty must be non-negative, got {l}")));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        match self.kind {
            LearnerKind::InterceptOnly => "intercept".into(),
            LearnerKind::GlmMainTerms => "glm".into(),
            LearnerKind::GlmRidge { lambda } => format!("ridge({lambda})"),
            LearnerKind::GlmRidgeInteractions { lambda } => format!("ridge2({lambda})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedLearner {
    pub spec: LearnerSpec,
    /// Intercept followed by one slope per design column.
    pub coefficients: Vec<f64>,
    pub n_inputs: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub names: Vec<String>,
    pub converged: bool,
    pub fallback: bool,
    pub iterations: usize,
    #[serde(skip)]
    pub fitted: Vec<f64>,
}

/// Expands raw covariates into the design implied by `kind` (no intercept).
pub fn design(kind: &LearnerKind, x: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, p) = x.shape();
    match kind {
        LearnerKind::InterceptOnly => DMatrix::zeros(n, 0),
        LearnerKind::GlmMainTerms | LearnerKind::GlmRidge { .. } => x.clone(),
        LearnerKind::GlmRidgeInteractions { .. } => {
            let q = p + p * p.saturating_sub(1) / 2;
            let mut z = DMatrix::zeros(n, q);
            for i in 0..n {
                let mut k = 0;
                for j in 0..p {
                    z[(i, k)] = x[(i, j)];
                    k += 1;
                }
                for j in 0..p {
                    for l in (j + 1)..p {
                        z[(i, k)] = x[(i, j)] * x[(i, l)];
                        k += 1;
                    }
                }
            }
            z
        }
    }
}

fn check_inputs(x: &DMatrix<f64>, y: &[f64], w: Option<&[f64]>, o: Option<&[f64]>) -> Result<()> {
    let n = y.len();
    if n == 0 {
        return Err(Error::DimensionMismatch("empty response".into()));
    }
    if x.nrows() != n {
        return Err(Error::DimensionMismatch(format!(
            "covariate matrix has {} rows, response has {n}",
            x.nrows()
        )));
    }
    if let Some(w) = w {
        if w.len() != n {
            return Err(Error::DimensionMismatch(format!("{} weights for {n} rows", w.len())));
        }
        if w.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::DimensionMismatch("weights must be non-negative".into()));
        }
    }
    if let Some(o) = o {
        if o.len() != n {
            return Err(Error::DimensionMismatch(format!("{} offsets for {n} rows", o.len())));
        }
    }
    Ok(())
}

/// Fits `spec` to `(x, y)`. Never fails on separation or singularity: such
/// fits come back flagged as `fallback` with intercept-only coefficients.
pub fn fit_learner(
    spec: &LearnerSpec,
    x: &DMatrix<f64>,
    y: &[f64],
    weights: Option<&[f64]>,
    offset: Option<&[f64]>,
) -> Result<FittedLearner> {
    check_inputs(x, y, weights, offset)?;
    spec.validate()?;
    if spec.family == Family::Binomial && y.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::DimensionMismatch(
            "binomial response must lie in [0, 1]".into(),
        ));
    }
    let n = y.len();
    let ones = vec![1.0; n];
    let zeros = vec![0.0; n];
    let w = weights.unwrap_or(&ones);
    let o = offset.unwrap_or(&zeros);
    let z = design(&spec.kind, x);
    let q = z.ncols();

    // Columns constant over the weighted rows carry no information.
    let active: Vec<usize> = (0..q)
        .filter(|&j| {
            let mut first = None;
            (0..n).filter(|&i| w[i] > 0.0).any(|i| {
                let v = z[(i, j)];
                match first {
                    None => {
                        first = Some(v);
                        false
                    }
                    Some(f) => v != f,
                }
            })
        })
        .collect();
    let mut za = DMatrix::zeros(n, active.len() + 1);
    for i in 0..n {
        za[(i, 0)] = 1.0;
        for (k, &j) in active.iter().enumerate() {
            za[(i, k + 1)] = z[(i, j)];
        }
    }
    let lambda = spec.lambda();
    let solved = match spec.family {
        Family::Binomial => irls(&za, y, w, o, lambda),
        Family::Gaussian => weighted_least_squares(&za, y, w, o, lambda),
    };
    let (beta_active, converged, iterations, fallback) = match solved {
        Some((b, it)) => (b, true, it, false),
        None => {
            let (b0, it) = intercept_only(spec.family, y, w, o);
            let mut b = vec![0.0; active.len() + 1];
            b[0] = b0;
            (b, false, it, spec.kind != LearnerKind::InterceptOnly)
        }
    };
    let mut coefficients = vec![0.0; q + 1];
    coefficients[0] = beta_active[0];
    for (k, &j) in active.iter().enumerate() {
        coefficients[j + 1] = beta_active[k + 1];
    }
    let mut fit = FittedLearner {
        spec: *spec,
        coefficients,
        n_inputs: x.ncols(),
        names: Vec::new(),
        converged: converged || spec.kind == LearnerKind::InterceptOnly,
        fallback,
        iterations,
        fitted: Vec::new(),
    };
    fit.fitted = fit.predict_design_with_offset(&z, Some(o));
    Ok(fit)
}

fn penalty_diag(p: usize, lambda: f64) -> Vec<f64> {
    (0..p).map(|j| if j == 0 { 0.0 } else { lambda }).collect()
}

fn binomial_objective(z: &DMatrix<f64>, y: &[f64], w: &[f64], o: &[f64], beta: &DVector<f64>, pen: &[f64]) -> f64 {
    let eta = z * beta;
    let mut nll = 0.0;
    for i in 0..y.len() {
        if w[i] == 0.0 {
            continue;
        }
        let e = eta[i] + o[i];
        nll += w[i] * (softplus(e) - y[i] * e);
    }
    nll + 0.5 * beta.iter().zip(pen).map(|(b, l)| l * b * b).sum::<f64>()
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Penalized IRLS. `None` signals separation, singularity or non-convergence.
fn irls(z: &DMatrix<f64>, y: &[f64], w: &[f64], o: &[f64], lambda: f64) -> Option<(Vec<f64>, usize)> {
    let (n, p) = z.shape();
    let pen = penalty_diag(p, lambda);
    let mut beta = DVector::zeros(p);
    let mut obj = binomial_objective(z, y, w, o, &beta, &pen);
    for it in 1..=MAX_ITER {
        let eta = z * &beta;
        let mut grad = DVector::zeros(p);
        let mut hess = DMatrix::zeros(p, p);
        for i in 0..n {
            if w[i] == 0.0 {
                continue;
            }
            let mu = expit(eta[i] + o[i]);
            let r = w[i] * (y[i] - mu);
            let v = w[i] * mu * (1.0 - mu);
            for a in 0..p {
                let za = z[(i, a)];
                grad[a] += za * r;
                for b in 0..=a {
                    hess[(a, b)] += v * za * z[(i, b)];
                }
            }
        }
        for a in 0..p {
            grad[a] -= pen[a] * beta[a];
            hess[(a, a)] += pen[a];
            for b in 0..a {
                hess[(b, a)] = hess[(a, b)];
            }
        }
        let chol = hess.cholesky()?;
        let step = chol.solve(&grad);
        if step.iter().any(|s: &f64| !s.is_finite()) {
            return None;
        }
        let mut t = 1.0;
        let mut candidate = &beta + &step * t;
        let mut cand_obj = binomial_objective(z, y, w, o, &candidate, &pen);
        while cand_obj > obj + 1e-12 * obj.abs().max(1.0) && t > 1e-6 {
            t *= 0.5;
            candidate = &beta + &step * t;
            cand_obj = binomial_objective(z, y, w, o, &candidate, &pen);
        }
        let change = (&candidate - &beta).amax();
        beta = candidate;
        obj = cand_obj;
        if lambda == 0.0 {
            let eta = z * &beta;
            if (0..n).any(|i| w[i] > 0.0 && (eta[i] + o[i]).abs() > SEPARATION_ETA) {
                return None;
            }
        }
        if change < TOL {
            return Some((beta.iter().copied().collect(), it));
        }
    }
    None
}

fn weighted_least_squares(z: &DMatrix<f64>, y: &[f64], w: &[f64], o: &[f64], lambda: f64) -> Option<(Vec<f64>, usize)> {
    let (n, p) = z.shape();
    let pen = penalty_diag(p, lambda);
    let mut rhs = DVector::zeros(p);
    let mut gram = DMatrix::zeros(p, p);
    for i in 0..n {
        if w[i] == 0.0 {
            continue;
        }
        let r = w[i] * (y[i] - o[i]);
        for a in 0..p {
            rhs[a] += z[(i, a)] * r;
            for b in 0..=a {
                gram[(a, b)] += w[i] * z[(i, a)] * z[(i, b)];
            }
        }
    }
    for a in 0..p {
        gram[(a, a)] += pen[a];
        for b in 0..a {
            gram[(b, a)] = gram[(a, b)];
        }
    }
    let beta = gram.cholesky()?.solve(&rhs);
    if beta.iter().any(|b: &f64| !b.is_finite()) {
        return None;
    }
    Some((beta.iter().copied().collect(), 1))
}

/// Intercept-only fit with offset; divergent intercepts are capped at the
/// separation threshold.
fn intercept_only(family: Family, y: &[f64], w: &[f64], o: &[f64]) -> (f64, usize) {
    let wsum: f64 = w.iter().sum();
    if wsum <= 0.0 {
        return (0.0, 0);
    }
    match family {
        Family::Gaussian => {
            let b = y.iter().zip(o).zip(w).map(|((y, o), w)| w * (y - o)).sum::<f64>() / wsum;
            (b, 1)
        }
        Family::Binomial => {
            let mut b = 0.0;
            for it in 1..=MAX_ITER {
                let mut g = 0.0;
                let mut h = 0.0;
                for i in 0..y.len() {
                    let mu = expit(b + o[i]);
                    g += w[i] * (y[i] - mu);
                    h += w[i] * mu * (1.0 - mu);
                }
                if h <= 0.0 {
                    return (b, it);
                }
                let step = (g / h).clamp(-5.0, 5.0);
                b = (b + step).clamp(-SEPARATION_ETA, SEPARATION_ETA);
                if step.abs() < TOL || b.abs() >= SEPARATION_ETA {
                    return (b, it);
                }
            }
            (b, MAX_ITER)
        }
    }
}

impl FittedLearner {
    pub fn with_names(mut self, names: Vec<String>) -> Self {
        self.names = names;
        self
    }

    pub fn linear_predictor(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        if x.ncols() != self.n_inputs {
            return Err(Error::DimensionMismatch(format!(
                "model fitted on {} columns, got {}",
                self.n_inputs,
                x.ncols()
            )));
        }
        let z = design(&self.spec.kind, x);
        Ok(self.eta(&z, None))
    }

    fn eta(&self, z: &DMatrix<f64>, offset: Option<&[f64]>) -> Vec<f64> {
        (0..z.nrows())
            .map(|i| {
                let mut e = self.coefficients[0] + offset.map(|o| o[i]).unwrap_or(0.0);
                for j in 0..z.ncols() {
                    let b = self.coefficients[j + 1];
                    if b != 0.0 {
                        e += b * z[(i, j)];
                    }
                }
                e
            })
            .collect()
    }

    fn predict_design_with_offset(&self, z: &DMatrix<f64>, offset: Option<&[f64]>) -> Vec<f64> {
        let eta = self.eta(z, offset);
        match self.spec.family {
            Family::Gaussian => eta,
            Family::Binomial => eta.into_iter().map(bounded_expit).collect(),
        }
    }

    /// Predictions on the response scale.
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        self.predict_with_offset(x, None)
    }

    pub fn predict_with_offset(&self, x: &DMatrix<f64>, offset: Option<&[f64]>) -> Result<Vec<f64>> {
        if x.ncols() != self.n_inputs {
            return Err(Error::DimensionMismatch(format!(
                "model fitted on {} columns, got {}",
                self.n_inputs,
                x.ncols()
            )));
        }
        if let Some(o) = offset {
            if o.len() != x.nrows() {
                return Err(Error::DimensionMismatch("offset length".into()));
            }
        }
        let z = design(&self.spec.kind, x);
        Ok(self.predict_design_with_offset(&z, offset))
    }
}

pub fn bounded_expit(eta: f64) -> f64 {
    expit(eta).clamp(PRED_BOUND, 1.0 - PRED_BOUND)
}

/// Convenience wrapper: fit then predict.
pub fn predict(fitted: &FittedLearner, x: &DMatrix<f64>) -> Result<Vec<f64>> {
    fitted.predict(x)
}

/// Default screening level.
pub const SCREEN_ALPHA: f64 = 0.10;

/// Univariate likelihood-ratio statistic of each column against the
/// intercept-only model. Constant columns get `None`.
pub fn screening_statistics(x: &DMatrix<f64>, y: &[f64], family: Family) -> Vec<Option<f64>> {
    let n = y.len();
    let ybar = y.iter().sum::<f64>() / n as f64;
    (0..x.ncols())
        .map(|j| {
            let col: Vec<f64> = x.column(j).iter().copied().collect();
            if col.iter().all(|v| *v == col[0]) {
                return None;
            }
            let stat = match family {
                Family::Gaussian => {
                    let rss0: f64 = y.iter().map(|v| (v - ybar).powi(2)).sum();
                    let xbar = col.iter().sum::<f64>() / n as f64;
                    let sxx: f64 = col.iter().map(|v| (v - xbar).powi(2)).sum();
                    let sxy: f64 = col.iter().zip(y).map(|(a, b)| (a - xbar) * (b - ybar)).sum();
                    let rss1 = (rss0 - sxy * sxy / sxx).max(0.0);
                    if rss0 <= 0.0 {
                        0.0
                    } else if rss1 <= 1e-300 {
                        f64::INFINITY
                    } else {
                        n as f64 * (rss0 / rss1).ln()
                    }
                }
                Family::Binomial => {
                    if ybar <= 0.0 || ybar >= 1.0 {
                        0.0
                    } else {
                        let ll0: f64 = y
                            .iter()
                            .map(|v| v * ybar.ln() + (1.0 - v) * (1.0 - ybar).ln())
                            .sum();
                        let ll1 = univariate_logistic_loglik(&col, y);
                        (2.0 * (ll1 - ll0)).max(0.0)
                    }
                }
            };
            Some(stat)
        })
        .collect()
}

/// Supremum of the two-parameter logistic log-likelihood (approached, not
/// necessarily attained, under separation).
fn univariate_logistic_loglik(x: &[f64], y: &[f64]) -> f64 {
    let ll = |b0: f64, b1: f64| -> f64 {
        x.iter()
            .zip(y)
            .map(|(xi, yi)| {
                let e = b0 + b1 * xi;
                yi * e - softplus(e)
            })
            .sum()
    };
    let (mut b0, mut b1) = (0.0, 0.0);
    let mut cur = ll(b0, b1);
    for _ in 0..MAX_ITER {
        let (mut g0, mut g1, mut h00, mut h01, mut h11) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (xi, yi) in x.iter().zip(y) {
            let mu = expit(b0 + b1 * xi);
            let v = mu * (1.0 - mu);
            g0 += yi - mu;
            g1 += (yi - mu) * xi;
            h00 += v;
            h01 += v * xi;
            h11 += v * xi * xi;
        }
        let det = h00 * h11 - h01 * h01;
        if !(det > 1e-300) {
            break;
        }
        let s0 = (h11 * g0 - h01 * g1) / det;
        let s1 = (h00 * g1 - h01 * g0) / det;
        let mut t = 1.0;
        let mut next = ll(b0 + t * s0, b1 + t * s1);
        while next < cur && t > 1e-8 {
            t *= 0.5;
            next = ll(b0 + t * s0, b1 + t * s1);
        }
        if next < cur {
            break;
        }
        b0 += t * s0;
        b1 += t * s1;
        let done = (t * s0).abs().max((t * s1).abs()) < TOL;
        cur = next;
        if done {
            break;
        }
    }
    cur
}

/// Columns whose univariate likelihood-ratio p-value is below `alpha`.
/// Never empty while some column is non-constant: the smallest p-value is
/// kept when nothing passes.
pub fn screen_covariates(x: &DMatrix<f64>, y: &[f64], family: Family, alpha: f64) -> Vec<usize> {
    let stats = screening_statistics(x, y, family);
    let pvals: Vec<Option<f64>> = stats.iter().map(|s| s.map(|s| chi_square_sf(s, 1.0))).collect();
    let kept: Vec<usize> = pvals
        .iter()
        .enumerate()
        .filter_map(|(j, p)| p.filter(|p| *p < alpha).map(|_| j))
        .collect();
    if !kept.is_empty() {
        return kept;
    }
    let mut best: Option<(usize, f64)> = None;
    for (j, p) in pvals.iter().enumerate() {
        if let Some(p) = p {
            if best.is_none_or(|(_, b)| *p < b) {
                best = Some((j, *p));
            }
        }
    }
    best.map(|(j, _)| vec![j]).unwrap_or_default()
}

/// Column subset of `x`.
pub fn select_columns(x: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), cols.len(), |i, k| x[(i, cols[k])])
}

/// Row subset of `x`.
pub fn select_rows(x: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), x.ncols(), |i, j| x[(rows[i], j)])
}

/// Nonparametric cell means over distinct covariate patterns: the fitted
/// values of a saturated model for discrete covariates.
#[derive(Debug, Clone)]
pub struct StratifiedMeans {
    cells: HashMap<Vec<u64>, (f64, f64)>,
    overall: f64,
    n_inputs: usize,
}

fn row_key(x: &DMatrix<f64>, i: usize) -> Vec<u64> {
    (0..x.ncols()).map(|j| x[(i, j)].to_bits()).collect()
}

impl StratifiedMeans {
    pub fn fit(x: &DMatrix<f64>, y: &[f64], weights: Option<&[f64]>) -> Result<Self> {
        check_inputs(x, y, weights, None)?;
        let mut cells: HashMap<Vec<u64>, (f64, f64)> = HashMap::new();
        let (mut s, mut c) = (0.0, 0.0);
        for i in 0..y.len() {
            let w = weights.map(|w| w[i]).unwrap_or(1.0);
            if w == 0.0 {
                continue;
            }
            let e = cells.entry(row_key(x, i)).or_insert((0.0, 0.0));
            e.0 += w * y[i];
            e.1 += w;
            s += w * y[i];
            c += w;
        }
        Ok(StratifiedMeans {
            cells,
            overall: if c > 0.0 { s / c } else { f64::NAN },
            n_inputs: x.ncols(),
        })
    }

    /// Predictions plus the number of rows whose pattern was never observed
    /// (those receive the overall mean).
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<(Vec<f64>, usize)> {
        if x.ncols() != self.n_inputs {
            return Err(Error::DimensionMismatch(format!(
                "stratified fit on {} columns, got {}",
                self.n_inputs,
                x.ncols()
            )));
        }
        let mut unseen = 0;
        let preds = (0..x.nrows())
            .map(|i| match self.cells.get(&row_key(x, i)) {
                Some((s, c)) => s / c,
                None => {
                    unseen += 1;
                    self.overall
                }
            })
            .collect();
        Ok((preds, unseen))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededStream;

    fn col(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(v.len(), 1, v)
    }

    #[test]
    fn intercept_only_mean() {
        let y = [0.0, 1.0, 1.0, 1.0];
        let x = DMatrix::zeros(4, 0);
        let fit = fit_learner(&LearnerSpec::intercept_only(Family::Binomial), &x, &y, None, None).unwrap();
        for p in fit.predict(&x).unwrap() {
            assert!((p - 0.75).abs() < 1e-9);
        }
        assert!(!fit.fallback);
    }

    #[test]
    fn huge_ridge_flattens_slope() {
        let x = col(&[0.0, 1.0, 2.0, 3.0, 0.5, 1.5]);
        let y = [0.0, 0.0, 1.0, 1.0, 0.0, 1.0];
        let fit = fit_learner(&LearnerSpec::ridge(1e12, Family::Binomial), &x, &y, None, None).unwrap();
        assert!(fit.coefficients[1].abs() < 1e-6);
        for p in fit.predict(&x).unwrap() {
            assert!((p - 0.5).abs() < 1e-5);
        }
    }

    #[test]
    fn main_terms_match_grid_search() {
        let xs = [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0];
        let ys = [0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0];
        let nll = |b0: f64, b1: f64| -> f64 {
            xs.iter()
                .zip(&ys)
                .map(|(x, y)| {
                    let p = expit(b0 + b1 * x);
                    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
                })
                .sum()
        };
        // Coarse grid, then a fine grid around the coarse optimum.
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in -300..=300 {
            for j in -300..=300 {
                let (b0, b1) = (i as f64 * 0.01, j as f64 * 0.01);
                let v = nll(b0, b1);
                if v < best.0 {
                    best = (v, b0, b1);
                }
            }
        }
        let (c0, c1) = (best.1, best.2);
        for i in -100..=100 {
            for j in -100..=100 {
                let (b0, b1) = (c0 + i as f64 * 1e-4, c1 + j as f64 * 1e-4);
                let v = nll(b0, b1);
                if v < best.0 {
                    best = (v, b0, b1);
                }
            }
        }
        let fit = fit_learner(&LearnerSpec::main_terms(Family::Binomial), &col(&xs), &ys, None, None).unwrap();
        assert!((fit.coefficients[0] - best.1).abs() < 1e-3, "{:?} {:?}", fit.coefficients, best);
        assert!((fit.coefficients[1] - best.2).abs() < 1e-3);
    }

    #[test]
    fn bounded_predictions() {
        let mut fit = fit_learner(
            &LearnerSpec::main_terms(Family::Binomial),
            &col(&[0.0, 1.0, 0.0, 1.0]),
            &[0.0, 1.0, 1.0, 0.0],
            None,
            None,
        )
        .unwrap();
        fit.coefficients = vec![-20.0, 0.0];
        assert_eq!(fit.predict(&col(&[1.0])).unwrap()[0], 1e-4);
        fit.coefficients = vec![20.0, 0.0];
        assert_eq!(fit.predict(&col(&[1.0])).unwrap()[0], 1.0 - 1e-4);
    }

    #[test]
    fn in_sample_predictions_reproduce_fitted_values() {
        let x = col(&[0.1, 0.4, 0.3, 0.9, 0.7, 0.2]);
        let y = [0.0, 1.0, 0.0, 1.0, 1.0, 0.0];
        let fit = fit_learner(&LearnerSpec::ridge(0.5, Family::Binomial), &x, &y, None, None).unwrap();
        assert_eq!(fit.predict(&x).unwrap(), fit.fitted);
    }

    #[test]
    fn separation_falls_back() {
        let x = col(&[0.0, 0.0, 1.0, 1.0]);
        let y = [0.0, 0.0, 1.0, 1.0];
        let fit = fit_learner(&LearnerSpec::main_terms(Family::Binomial), &x, &y, None, None).unwrap();
        assert!(fit.fallback);
        assert_eq!(fit.coefficients[1], 0.0);
        assert!((expit(fit.coefficients[0]) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn dimension_mismatch() {
        let x = col(&[0.0, 1.0]);
        assert!(matches!(
            fit_learner(&LearnerSpec::main_terms(Family::Gaussian), &x, &[1.0], None, None),
            Err(Error::DimensionMismatch(_))
        ));
        let fit = fit_learner(&LearnerSpec::main_terms(Family::Gaussian), &x, &[1.0, 2.0], None, None).unwrap();
        assert!(fit.predict(&DMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn gaussian_ols() {
        let x = col(&[0.0, 1.0, 2.0, 3.0]);
        let y = [1.0, 3.0, 5.0, 7.0];
        let fit = fit_learner(&LearnerSpec::main_terms(Family::Gaussian), &x, &y, None, None).unwrap();
        assert!((fit.coefficients[0] - 1.0).abs() < 1e-10);
        assert!((fit.coefficients[1] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn interactions_design_width() {
        let x = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let z = design(&LearnerKind::GlmRidgeInteractions { lambda: 0.0 }, &x);
        assert_eq!(z.ncols(), 6);
        assert_eq!(z.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 2.0, 3.0, 2.0, 3.0, 6.0]);
    }

    #[test]
    fn offset_intercept_matches_grid_oracle() {
        let o = [-1.0, 0.5, 0.2, -0.3, 1.2, 0.0];
        let y = [0.0, 1.0, 0.3, 0.0, 1.0, 0.6];
        let w = [1.0, 2.0, 1.0, 0.5, 1.0, 1.0];
        let x = DMatrix::zeros(6, 0);
        let fit = fit_learner(&LearnerSpec::intercept_only(Family::Binomial), &x, &y, Some(&w), Some(&o)).unwrap();
        let nll = |b: f64| -> f64 {
            (0..6)
                .map(|i| {
                    let p = expit(b + o[i]);
                    -w[i] * (y[i] * p.ln() + (1.0 - y[i]) * (1.0 - p).ln())
                })
                .sum()
        };
        let mut best = (f64::INFINITY, 0.0);
        for k in -400_000..=400_000 {
            let b = k as f64 * 1e-5;
            let v = nll(b);
            if v < best.0 {
                best = (v, b);
            }
        }
        assert!((fit.coefficients[0] - best.1).abs() < 1e-4);
    }

    #[test]
    fn screening_keeps_perfect_predictor_and_drops_constant() {
        let y = [0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0];
        let mut x = DMatrix::zeros(8, 3);
        for i in 0..8 {
            x[(i, 0)] = 1.0;
            x[(i, 1)] = y[i];
            x[(i, 2)] = (i % 3) as f64;
        }
        let kept = screen_covariates(&x, &y, Family::Binomial, SCREEN_ALPHA);
        assert!(kept.contains(&1));
        assert!(!kept.contains(&0));
    }

    #[test]
    fn screening_never_empty() {
        let mut r = SeededStream::new(5, 0).rng();
        let y: Vec<f64> = (0..50).map(|_| if r.bernoulli(0.5) { 1.0 } else { 0.0 }).collect();
        let x = DMatrix::from_fn(50, 2, |_, _| r.normal(0.0, 1.0));
        let kept = screen_covariates(&x, &y, Family::Binomial, 1e-12);
        assert_eq!(kept.len(), 1);
    }

    #[test]
    fn stratified_means_are_cell_means() {
        let x = col(&[0.0, 0.0, 1.0, 1.0, 1.0]);
        let y = [1.0, 0.0, 1.0, 1.0, 1.0];
        let s = StratifiedMeans::fit(&x, &y, None).unwrap();
        let (p, unseen) = s.predict(&col(&[0.0, 1.0, 2.0])).unwrap();
        assert_eq!(p[0], 0.5);
        assert_eq!(p[1], 1.0);
        assert_eq!(p[2], 0.8);
        assert_eq!(unseen, 1);
    }
}
