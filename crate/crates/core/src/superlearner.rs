//! V-fold cross-validated ensembles over the learner library.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learners::{
    fit_learner, screen_covariates, select_columns, select_rows, Family, FittedLearner, LearnerSpec,
};
use crate::rng::SeededStream;

pub const DEFAULT_FOLDS: usize = 10;
pub const EG_STEPS: usize = 500;
pub const EG_RATE: f64 = 0.1;
pub const EG_TOL: f64 = 1e-8;

/// Number of folds for `n_independent` units: 10, or `max(2, n/2)` below 20.
pub fn default_folds(n_independent: usize) -> usize {
    if n_independent < 20 {
        (n_independent / 2).max(2)
    } else {
        DEFAULT_FOLDS
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoldUnit {
    Row,
    Group,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub n: usize,
    pub v: usize,
    /// Fold of each row.
    pub assignment: Vec<usize>,
    pub stratified: bool,
    pub unit: FoldUnit,
}

/// Balanced random partition of `n` rows into `v` folds. With `groups`, whole
/// groups are assigned; with `strata`, each stratum is dealt across folds
/// separately while the running fold counter keeps overall sizes balanced.
pub fn make_folds(
    n: usize,
    v: usize,
    stream: &SeededStream,
    strata: Option<&[usize]>,
    groups: Option<&[usize]>,
) -> Result<FoldPlan> {
    if let Some(s) = strata {
        if s.len() != n {
            return Err(Error::DimensionMismatch(format!("{} strata labels for {n} rows", s.len())));
        }
    }
    // Units to deal: one per group (first-appearance order) or one per row.
    let (unit_of_row, n_units, unit_stratum): (Vec<usize>, usize, Vec<usize>) = match groups {
        Some(g) => {
            if g.len() != n {
                return Err(Error::DimensionMismatch(format!("{} group ids for {n} rows", g.len())));
            }
            let mut map = std::collections::HashMap::new();
            let mut strata_of = Vec::new();
            let unit_of_row = g
                .iter()
                .enumerate()
                .map(|(r, gid)| {
                    *map.entry(*gid).or_insert_with(|| {
                        strata_of.push(strata.map(|s| s[r]).unwrap_or(0));
                        strata_of.len() - 1
                    })
                })
                .collect();
            (unit_of_row, strata_of.len(), strata_of)
        }
        None => ((0..n).collect(), n, (0..n).map(|r| strata.map(|s| s[r]).unwrap_or(0)).collect()),
    };
    if v < 2 || v > n_units {
        return Err(Error::TooFewUnits {
            needed: v.max(2),
            available: n_units,
        });
    }
    let mut rng = stream.rng();
    let mut labels: Vec<usize> = unit_stratum.clone();
    labels.sort_unstable();
    labels.dedup();
    let mut unit_fold = vec![0usize; n_units];
    let mut next = 0usize;
    for label in labels {
        let mut members: Vec<usize> = (0..n_units).filter(|&u| unit_stratum[u] == label).collect();
        rng.shuffle(&mut members);
        for u in members {
            unit_fold[u] = next % v;
            next += 1;
        }
    }
    Ok(FoldPlan {
        n,
        v,
        assignment: unit_of_row.iter().map(|&u| unit_fold[u]).collect(),
        stratified: strata.is_some(),
        unit: if groups.is_some() { FoldUnit::Group } else { FoldUnit::Row },
    })
}

impl FoldPlan {
    /// Deterministic round-robin plan, used where no randomness is wanted.
    pub fn round_robin(n: usize, v: usize) -> FoldPlan {
        FoldPlan {
            n,
            v,
            assignment: (0..n).map(|i| i % v.max(1)).collect(),
            stratified: false,
            unit: FoldUnit::Row,
        }
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.v];
        for &f in &self.assignment {
            s[f] += 1;
        }
        s
    }

    pub fn validation_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.n).filter(|&i| self.assignment[i] == fold).collect()
    }

    pub fn training_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.n).filter(|&i| self.assignment[i] != fold).collect()
    }

    /// Plan over the listed rows, keeping their fold labels and dropping
    /// empty folds. Falls back to round-robin when fewer than two folds stay
    /// populated.
    pub fn restrict(&self, rows: &[usize]) -> FoldPlan {
        let labels: Vec<usize> = rows.iter().map(|&r| self.assignment[r]).collect();
        let mut used: Vec<usize> = labels.clone();
        used.sort_unstable();
        used.dedup();
        if used.len() >= 2 {
            FoldPlan {
                n: rows.len(),
                v: used.len(),
                assignment: labels
                    .iter()
                    .map(|l| used.binary_search(l).expect("label present"))
                    .collect(),
                stratified: self.stratified,
                unit: self.unit,
            }
        } else {
            FoldPlan::round_robin(rows.len(), self.v.min(rows.len()).max(1))
        }
    }

    pub fn non_empty_folds(&self) -> usize {
        self.fold_sizes().iter().filter(|&&s| s > 0).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    NegLogLikelihood,
    SquaredError,
}

impl Loss {
    pub fn for_family(family: Family) -> Loss {
        match family {
            Family::Binomial => Loss::NegLogLikelihood,
            Family::Gaussian => Loss::SquaredError,
        }
    }

    pub fn value(self, y: f64, p: f64) -> f64 {
        match self {
            Loss::NegLogLikelihood => {
                let mut l = 0.0;
                if y > 0.0 {
                    l -= y * p.ln();
                }
                if y < 1.0 {
                    l -= (1.0 - y) * (1.0 - p).ln();
                }
                l
            }
            Loss::SquaredError => (y - p) * (y - p),
        }
    }

    fn derivative(self, y: f64, p: f64) -> f64 {
        match self {
            Loss::NegLogLikelihood => -y / p + (1.0 - y) / (1.0 - p),
            Loss::SquaredError => 2.0 * (p - y),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMode {
    Discrete,
    Convex,
}

/// Held-out predictions (n x L) plus the number of learner fallbacks.
#[derive(Debug, Clone)]
pub struct CrossValidated {
    pub predictions: DMatrix<f64>,
    pub fallbacks: usize,
}

fn fit_one(
    spec: &LearnerSpec,
    x: &DMatrix<f64>,
    y: &[f64],
    screen: Option<f64>,
) -> Result<(FittedLearner, Option<Vec<usize>>)> {
    match screen {
        Some(alpha) if x.ncols() > 0 => {
            let cols = screen_covariates(x, y, spec.family, alpha);
            let xs = select_columns(x, &cols);
            Ok((fit_learner(spec, &xs, y, None, None)?, Some(cols)))
        }
        _ => Ok((fit_learner(spec, x, y, None, None)?, None)),
    }
}

fn predict_one(fit: &FittedLearner, cols: &Option<Vec<usize>>, x: &DMatrix<f64>) -> Result<Vec<f64>> {
    match cols {
        Some(c) => fit.predict(&select_columns(x, c)),
        None => fit.predict(x),
    }
}

/// Held-out predictions of every learner. With fewer than two populated
/// folds the in-sample predictions are returned instead.
pub fn cv_predictions(
    library: &[LearnerSpec],
    x: &DMatrix<f64>,
    y: &[f64],
    folds: &FoldPlan,
    screen: Option<f64>,
) -> Result<CrossValidated> {
    if library.is_empty() {
        return Err(Error::Config("learner library is empty".into()));
    }
    let n = y.len();
    if x.nrows() != n || folds.n != n {
        return Err(Error::DimensionMismatch(format!(
            "x has {} rows, y {n}, fold plan {}",
            x.nrows(),
            folds.n
        )));
    }
    let mut z = DMatrix::zeros(n, library.len());
    let mut fallbacks = 0;
    if folds.non_empty_folds() < 2 {
        for (l, spec) in library.iter().enumerate() {
            let (fit, cols) = fit_one(spec, x, y, screen)?;
            fallbacks += fit.fallback as usize;
            for (i, p) in predict_one(&fit, &cols, x)?.into_iter().enumerate() {
                z[(i, l)] = p;
            }
        }
        return Ok(CrossValidated { predictions: z, fallbacks });
    }
    for fold in 0..folds.v {
        let valid = folds.validation_rows(fold);
        if valid.is_empty() {
            continue;
        }
        let train = folds.training_rows(fold);
        let xt = select_rows(x, &train);
        let yt: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        let xv = select_rows(x, &valid);
        for (l, spec) in library.iter().enumerate() {
            let (fit, cols) = fit_one(spec, &xt, &yt, screen)?;
            fallbacks += fit.fallback as usize;
            for (k, p) in predict_one(&fit, &cols, &xv)?.into_iter().enumerate() {
                z[(valid[k], l)] = p;
            }
        }
    }
    Ok(CrossValidated { predictions: z, fallbacks })
}

fn mean_loss(loss: Loss, y: &[f64], p: impl Iterator<Item = f64>) -> f64 {
    let mut s = 0.0;
    for (yi, pi) in y.iter().zip(p) {
        s += loss.value(*yi, pi);
    }
    s / y.len() as f64
}

fn column_risks(z: &DMatrix<f64>, y: &[f64], loss: Loss) -> Vec<f64> {
    (0..z.ncols())
        .map(|l| mean_loss(loss, y, z.column(l).iter().copied()))
        .collect()
}

/// Per-learner cross-validated risk.
pub fn cv_risks(
    library: &[LearnerSpec],
    x: &DMatrix<f64>,
    y: &[f64],
    folds: &FoldPlan,
    loss: Loss,
) -> Result<Vec<f64>> {
    let cv = cv_predictions(library, x, y, folds, None)?;
    Ok(column_risks(&cv.predictions, y, loss))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuperLearnerFit {
    pub library: Vec<LearnerSpec>,
    pub fits: Vec<FittedLearner>,
    pub screens: Vec<Option<Vec<usize>>>,
    pub cv_risk: Vec<f64>,
    pub ensemble_cv_risk: f64,
    pub mode: EnsembleMode,
    pub weights: Vec<f64>,
    pub loss: Loss,
    pub fallbacks: usize,
}

fn combo_risk(z: &DMatrix<f64>, y: &[f64], w: &[f64], loss: Loss) -> f64 {
    let preds = (0..z.nrows()).map(|i| (0..z.ncols()).map(|l| w[l] * z[(i, l)]).sum::<f64>());
    mean_loss(loss, y, preds)
}

/// Exponentiated-gradient descent on the simplex.
fn convex_weights(z: &DMatrix<f64>, y: &[f64], loss: Loss) -> Vec<f64> {
    let (n, l) = z.shape();
    let mut w = vec![1.0 / l as f64; l];
    for _ in 0..EG_STEPS {
        let mut grad = vec![0.0; l];
        for i in 0..n {
            let p: f64 = (0..l).map(|k| w[k] * z[(i, k)]).sum();
            let d = loss.derivative(y[i], p);
            for k in 0..l {
                grad[k] += d * z[(i, k)];
            }
        }
        let gmax = grad.iter().fold(f64::NEG_INFINITY, |a, b| a.max(b / n as f64));
        let mut next: Vec<f64> = (0..l)
            .map(|k| w[k] * (-EG_RATE * (grad[k] / n as f64 - gmax)).exp())
            .collect();
        let s: f64 = next.iter().sum();
        next.iter_mut().for_each(|v| *v /= s);
        let change = next.iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        w = next;
        if change < EG_TOL {
            break;
        }
    }
    w
}

/// Fits the ensemble; see [`fit_super_learner_screened`].
pub fn fit_super_learner(
    library: &[LearnerSpec],
    x: &DMatrix<f64>,
    y: &[f64],
    folds: &FoldPlan,
    loss: Loss,
    mode: EnsembleMode,
) -> Result<SuperLearnerFit> {
    fit_super_learner_screened(library, x, y, folds, loss, mode, None)
}

/// Discrete mode puts weight 1 on the lowest CV risk (earliest wins ties).
/// Convex mode runs exponentiated gradient and keeps the better of that
/// solution and the best vertex, so it never loses to the discrete choice.
/// With `screen = Some(alpha)` each learner sees only the columns passing
/// likelihood-ratio screening on its own training data.
pub fn fit_super_learner_screened(
    library: &[LearnerSpec],
    x: &DMatrix<f64>,
    y: &[f64],
    folds: &FoldPlan,
    loss: Loss,
    mode: EnsembleMode,
    screen: Option<f64>,
) -> Result<SuperLearnerFit> {
    let cv = cv_predictions(library, x, y, folds, screen)?;
    let risks = column_risks(&cv.predictions, y, loss);
    let mut best = 0;
    for (l, r) in risks.iter().enumerate() {
        if *r < risks[best] {
            best = l;
        }
    }
    let mut weights = vec![0.0; library.len()];
    weights[best] = 1.0;
    let mut ensemble_risk = risks[best];
    if mode == EnsembleMode::Convex && library.len() > 1 {
        let w = convex_weights(&cv.predictions, y, loss);
        let r = combo_risk(&cv.predictions, y, &w, loss);
        if r <= ensemble_risk {
            weights = w;
            ensemble_risk = r;
        }
    }
    let mut fits = Vec::with_capacity(library.len());
    let mut screens = Vec::with_capacity(library.len());
    let mut fallbacks = cv.fallbacks;
    for (l, spec) in library.iter().enumerate() {
        // Zero-weight learners are still refitted so the fit is inspectable.
        let (fit, cols) = fit_one(spec, x, y, screen)?;
        if weights[l] > 0.0 {
            fallbacks += fit.fallback as usize;
        }
        fits.push(fit);
        screens.push(cols);
    }
    Ok(SuperLearnerFit {
        library: library.to_vec(),
        fits,
        screens,
        cv_risk: risks,
        ensemble_cv_risk: ensemble_risk,
        mode,
        weights,
        loss,
        fallbacks,
    })
}

impl SuperLearnerFit {
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        let mut out = vec![0.0; x.nrows()];
        for (l, w) in self.weights.iter().enumerate() {
            if *w == 0.0 {
                continue;
            }
            let p = predict_one(&self.fits[l], &self.screens[l], x)?;
            for (o, v) in out.iter_mut().zip(p) {
                *o += w * v;
            }
        }
        Ok(out)
    }

    pub fn selected(&self) -> Option<usize> {
        self.weights.iter().position(|w| *w == 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_into_five() {
        let p = make_folds(10, 5, &SeededStream::new(1, 1), None, None).unwrap();
        assert_eq!(p.fold_sizes(), vec![2; 5]);
    }

    #[test]
    fn grouped_folds_keep_clusters() {
        let groups: Vec<usize> = (0..28).flat_map(|c| vec![c; 3 + c % 4]).collect();
        let p = make_folds(groups.len(), 10, &SeededStream::new(2, 0), None, Some(&groups)).unwrap();
        let mut per_fold = vec![std::collections::BTreeSet::new(); 10];
        for (r, g) in groups.iter().enumerate() {
            per_fold[p.assignment[r]].insert(*g);
        }
        for c in 0..28 {
            let folds: std::collections::BTreeSet<usize> = groups
                .iter()
                .enumerate()
                .filter(|(_, g)| **g == c)
                .map(|(r, _)| p.assignment[r])
                .collect();
            assert_eq!(folds.len(), 1);
        }
        for f in per_fold {
            assert!(f.len() == 2 || f.len() == 3);
        }
    }

    #[test]
    fn stratified_folds_balance_positives() {
        let strata: Vec<usize> = (0..100).map(|i| (i < 30) as usize).collect();
        let p = make_folds(100, 5, &SeededStream::new(3, 0), Some(&strata), None).unwrap();
        for f in 0..5 {
            let pos = (0..100).filter(|&i| p.assignment[i] == f && strata[i] == 1).count();
            assert_eq!(pos, 6);
        }
        assert_eq!(p.fold_sizes(), vec![20; 5]);
    }

    #[test]
    fn too_many_folds() {
        assert!(matches!(
            make_folds(3, 4, &SeededStream::new(0, 0), None, None),
            Err(Error::TooFewUnits { .. })
        ));
    }

    #[test]
    fn constant_response_risk_is_bound() {
        let x = DMatrix::zeros(20, 0);
        let y = vec![1.0; 20];
        let folds = make_folds(20, 5, &SeededStream::new(0, 0), None, None).unwrap();
        let r = cv_risks(&[LearnerSpec::intercept_only(Family::Binomial)], &x, &y, &folds, Loss::NegLogLikelihood).unwrap();
        assert!((r[0] - (-(1.0f64 - 1e-4).ln())).abs() < 1e-12);
        assert!((r[0] - 1.00005e-4).abs() < 1e-8);
    }

    #[test]
    fn identical_specs_identical_risks() {
        let mut rng = SeededStream::new(4, 0).rng();
        let x = DMatrix::from_fn(60, 2, |_, _| rng.normal(0.0, 1.0));
        let y: Vec<f64> = (0..60).map(|i| (x[(i, 0)] + rng.normal(0.0, 1.0) > 0.0) as u8 as f64).collect();
        let folds = make_folds(60, 5, &SeededStream::new(4, 1), None, None).unwrap();
        let spec = LearnerSpec::main_terms(Family::Binomial);
        let r = cv_risks(&[spec, spec], &x, &y, &folds, Loss::NegLogLikelihood).unwrap();
        assert_eq!(r[0], r[1]);
    }

    #[test]
    fn single_learner_gets_full_weight() {
        let x = DMatrix::from_fn(30, 1, |i, _| i as f64 / 30.0);
        let y: Vec<f64> = (0..30).map(|i| (i % 3 == 0) as u8 as f64).collect();
        let folds = make_folds(30, 5, &SeededStream::new(5, 0), None, None).unwrap();
        for mode in [EnsembleMode::Discrete, EnsembleMode::Convex] {
            let sl = fit_super_learner(&[LearnerSpec::main_terms(Family::Binomial)], &x, &y, &folds, Loss::NegLogLikelihood, mode).unwrap();
            assert_eq!(sl.weights, vec![1.0]);
        }
    }

    #[test]
    fn held_out_prediction_ignores_own_response() {
        let mut rng = SeededStream::new(6, 0).rng();
        let x = DMatrix::from_fn(11, 1, |_, _| rng.normal(0.0, 1.0));
        let mut y: Vec<f64> = (0..11).map(|i| x[(i, 0)] * 2.0 + rng.normal(0.0, 0.5)).collect();
        // Unit 10 alone in its fold.
        let mut plan = FoldPlan::round_robin(11, 6);
        plan.assignment = vec![0, 1, 2, 3, 4, 0, 1, 2, 3, 4, 5];
        let lib = [LearnerSpec::main_terms(Family::Gaussian)];
        let a = cv_predictions(&lib, &x, &y, &plan, None).unwrap();
        y[10] += 100.0;
        let b = cv_predictions(&lib, &x, &y, &plan, None).unwrap();
        assert_eq!(a.predictions[(10, 0)], b.predictions[(10, 0)]);
    }

    #[test]
    fn restrict_keeps_labels() {
        let plan = make_folds(20, 4, &SeededStream::new(7, 0), None, None).unwrap();
        let rows: Vec<usize> = (0..20).step_by(2).collect();
        let sub = plan.restrict(&rows);
        assert_eq!(sub.n, 10);
        for (k, &r) in rows.iter().enumerate() {
            for (k2, &r2) in rows.iter().enumerate() {
                assert_eq!(
                    plan.assignment[r] == plan.assignment[r2],
                    sub.assignment[k] == sub.assignment[k2]
                );
            }
        }
    }
}
