//! Plasmode data-generating processes. The outcome-blind generator resamples
//! baseline rows and simulates everything after baseline from fitted
//! sequential models; the treatment-blind generator keeps the covariate and
//! outcome rows, permutes cluster treatment and imposes a missingness
//! mechanism supplied as a separate file.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{resample_indices, Column, ColumnKind, ColumnRole, Dataset, StudyType};
use crate::error::{Error, Result};
use crate::learners::{fit_learner, Family, FittedLearner, LearnerSpec};
use crate::ltmle::{Panel, Regimen};
use crate::rng::SeededStream;
use crate::stats::{expit, mean, sample_variance};
use crate::superlearner::{cv_risks, make_folds, Loss};
use crate::tmle::covariate_matrix;
use crate::twostage::EffectScale;

pub const LAMBDA_GRID: [f64; 4] = [0.001, 0.01, 0.1, 1.0];
pub const MIN_TRUTH_REPLICATES: usize = 100_000;
const GENERATOR_FOLDS: usize = 5;
const TRUTH_CHUNK: usize = 8192;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeBlindSpec {
    #[serde(default = "default_grid")]
    pub lambda_grid: Vec<f64>,
    /// Replaces the main-effect coefficient of every treatment node in the
    /// post-baseline covariate and outcome models; treatment interactions in
    /// those models are zeroed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub treatment_override: Option<f64>,
    /// Target marginal prevalence of the first treatment node.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exposure_prevalence: Option<f64>,
    /// Seed for the cross-validation folds used in fitting.
    #[serde(default)]
    pub fit_seed: u64,
}

fn default_grid() -> Vec<f64> {
    LAMBDA_GRID.to_vec()
}

impl Default for OutcomeBlindSpec {
    fn default() -> Self {
        OutcomeBlindSpec {
            lambda_grid: default_grid(),
            treatment_override: None,
            exposure_prevalence: None,
            fit_seed: 0,
        }
    }
}

/// Logistic measurement model `P(Δ=1) = expit(intercept + Σ b_c x_c)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingnessMechanism {
    pub intercept: f64,
    #[serde(default)]
    pub coefficients: BTreeMap<String, f64>,
}

impl MissingnessMechanism {
    /// Parses a mechanism file and returns it with the SHA-256 of its bytes.
    pub fn load(path: &Path) -> Result<(MissingnessMechanism, String)> {
        if !path.exists() {
            return Err(Error::FileNotFound(path.to_path_buf()));
        }
        let bytes = std::fs::read(path)?;
        let m: MissingnessMechanism = serde_json::from_slice(&bytes)?;
        if !m.intercept.is_finite() || m.coefficients.values().any(|v| !v.is_finite()) {
            return Err(Error::InvalidMechanism("coefficients must be finite".into()));
        }
        Ok((m, sha256_hex(&bytes)))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentBlindSpec {
    /// Cluster-level column whose levels define permutation strata.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strata: Option<String>,
    pub mechanism: MissingnessMechanism,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorSpec {
    OutcomeBlind(OutcomeBlindSpec),
    TreatmentBlind(TreatmentBlindSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruthMethod {
    NullByDesign,
    MonteCarloGformula,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrueEffect {
    pub scale: EffectScale,
    pub value: f64,
    pub mc_se: f64,
    pub method: TruthMethod,
}

impl TrueEffect {
    pub fn null(scale: EffectScale) -> Self {
        TrueEffect {
            scale,
            value: match scale {
                EffectScale::Ratio => 1.0,
                EffectScale::Difference => 0.0,
            },
            mc_se: 0.0,
            method: TruthMethod::NullByDesign,
        }
    }

    pub fn is_null(&self) -> bool {
        match self.method {
            TruthMethod::NullByDesign => true,
            TruthMethod::MonteCarloGformula => {
                let null = match self.scale {
                    EffectScale::Ratio => 1.0,
                    EffectScale::Difference => 0.0,
                };
                (self.value - null).abs() <= self.mc_se.max(1e-12)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Treatment,
    Censoring,
    Covariate,
    Outcome,
}

/// One fitted conditional model in the sequential order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerativeNode {
    pub name: String,
    pub kind: NodeKind,
    pub period: usize,
    pub family: Family,
    pub lambda: f64,
    /// Residual SD for Gaussian nodes.
    pub sd: f64,
    /// Number of leading history features the model conditions on.
    pub inputs: usize,
    pub input_names: Vec<String>,
    pub model: FittedLearner,
}

impl GenerativeNode {
    fn mean(&self, x: &DMatrix<f64>, shift: f64) -> Result<Vec<f64>> {
        let eta = self.model.linear_predictor(x)?;
        Ok(match self.family {
            Family::Gaussian => eta,
            Family::Binomial => eta
                .into_iter()
                .map(|e| crate::learners::bounded_expit(e + shift))
                .collect(),
        })
    }
}

/// Output layout of generated data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Layout {
    study: StudyType,
    baseline: Vec<(String, ColumnKind)>,
    time_varying: Vec<(String, ColumnKind)>,
    treatment: String,
    censoring: Option<String>,
    outcome: String,
    subject: Option<String>,
    time: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeBlindGenerator {
    pub periods: usize,
    pub nodes: Vec<GenerativeNode>,
    /// Constant added to every treatment linear predictor.
    pub exposure_shift: f64,
    /// Resampling pool: one row per source subject, W then L(0).
    #[serde(skip)]
    pub pool: DMatrix<f64>,
    pub pool_names: Vec<String>,
    layout: Layout,
}

fn is_binary(v: &[f64]) -> bool {
    v.iter().all(|x| *x == 0.0 || *x == 1.0)
}

/// Terms of an interaction design over `p` inputs, in design-column order:
/// main effects, then pairwise products.
fn interaction_terms(p: usize) -> Vec<(usize, Option<usize>)> {
    let mut out: Vec<(usize, Option<usize>)> = (0..p).map(|j| (j, None)).collect();
    for j in 0..p {
        for l in (j + 1)..p {
            out.push((j, Some(l)));
        }
    }
    out
}

fn fit_node(
    x: &DMatrix<f64>,
    y: &[f64],
    grid: &[f64],
    stream: &SeededStream,
) -> Result<(FittedLearner, f64, Family, f64)> {
    let family = if is_binary(y) { Family::Binomial } else { Family::Gaussian };
    let library: Vec<LearnerSpec> = grid.iter().map(|l| LearnerSpec::ridge_interactions(*l, family)).collect();
    let lambda = if y.len() >= 2 * GENERATOR_FOLDS && grid.len() > 1 {
        let folds = make_folds(y.len(), GENERATOR_FOLDS, stream, None, None)?;
        let risks = cv_risks(&library, x, y, &folds, Loss::for_family(family))?;
        let mut best = 0;
        for (k, r) in risks.iter().enumerate() {
            if *r < risks[best] {
                best = k;
            }
        }
        grid[best]
    } else {
        *grid.last().ok_or_else(|| Error::Config("empty lambda grid".into()))?
    };
    let fit = fit_learner(&LearnerSpec::ridge_interactions(lambda, family), x, y, None, None)?;
    let sd = match family {
        Family::Gaussian => {
            let p = fit.predict(x)?;
            (y.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64).sqrt()
        }
        Family::Binomial => 0.0,
    };
    Ok((fit, lambda, family, sd))
}

fn kind_of(ds: &Dataset, name: &str) -> ColumnKind {
    ds.column(name).map(|c| c.kind).unwrap_or(ColumnKind::Real)
}

/// Fits the sequential generative models of an outcome-blind generator.
pub fn fit_generative_models(source: &Dataset, study: StudyType, spec: &OutcomeBlindSpec) -> Result<OutcomeBlindGenerator> {
    if spec.lambda_grid.is_empty() || spec.lambda_grid.iter().any(|l| !(*l >= 0.0)) {
        return Err(Error::Config("lambda grid must be non-empty and non-negative".into()));
    }
    let (panel, layout) = match study {
        StudyType::PointTreatment => {
            let (w, names) = covariate_matrix(source, &[ColumnRole::Baseline])?;
            let a = source.role_column(ColumnRole::Treatment)?;
            let y = source.role_column(ColumnRole::Outcome)?;
            let n = source.n_rows();
            let panel = Panel::new(
                (0..n).map(|i| i.to_string()).collect(),
                w,
                vec![DMatrix::zeros(n, 0)],
                Some(vec![a.dense()]),
                None,
                y.dense(),
            )?;
            let layout = Layout {
                study,
                baseline: names.iter().map(|n| (n.clone(), kind_of(source, n))).collect(),
                time_varying: Vec::new(),
                treatment: a.name.clone(),
                censoring: None,
                outcome: y.name.clone(),
                subject: None,
                time: None,
            };
            (panel, layout)
        }
        StudyType::Longitudinal => {
            let panel = Panel::from_dataset(source)?;
            let names = |role| -> Vec<(String, ColumnKind)> {
                source.with_role(role).iter().map(|c| (c.name.clone(), c.kind)).collect()
            };
            let layout = Layout {
                study,
                baseline: names(ColumnRole::Baseline),
                time_varying: names(ColumnRole::TimeVarying),
                treatment: source.role_column(ColumnRole::Treatment)?.name.clone(),
                censoring: source.first_with_role(ColumnRole::Censoring).map(|c| c.name.clone()),
                outcome: source.role_column(ColumnRole::Outcome)?.name.clone(),
                subject: source.first_with_role(ColumnRole::SubjectId).map(|c| c.name.clone()),
                time: source.first_with_role(ColumnRole::TimeIndex).map(|c| c.name.clone()),
            };
            (panel, layout)
        }
        StudyType::ClusterTwoStage => {
            return Err(Error::Config(
                "outcome-blind generation applies to point-treatment and longitudinal studies".into(),
            ))
        }
    };
    fit_on_panel(&panel, layout, spec)
}

fn fit_on_panel(panel: &Panel, layout: Layout, spec: &OutcomeBlindSpec) -> Result<OutcomeBlindGenerator> {
    let n = panel.n();
    let periods = panel.periods();
    let treatment = panel
        .treatment
        .as_ref()
        .ok_or_else(|| Error::Config("outcome-blind generation needs a treatment column".into()))?;
    // History columns, in generation order; censoring never enters.
    let mut hist: Vec<Vec<f64>> = Vec::new();
    let mut hist_names: Vec<String> = Vec::new();
    for j in 0..panel.baseline.ncols() {
        hist.push(panel.baseline.column(j).iter().copied().collect());
        hist_names.push(layout.baseline[j].0.clone());
    }
    for j in 0..panel.covariates[0].ncols() {
        hist.push(panel.covariates[0].column(j).iter().copied().collect());
        hist_names.push(format!("{}[0]", layout.time_varying[j].0));
    }
    let pool_width = hist.len();
    let pool = DMatrix::from_fn(n, pool_width, |i, j| hist[j][i]);
    let pool_names = hist_names.clone();

    let uncensored_after = |t: usize, i: usize| {
        panel.present[t][i] && panel.censoring.as_ref().is_none_or(|c| c[t][i] == 0.0)
    };
    let mut nodes = Vec::new();
    let mut treatment_inputs: Vec<usize> = Vec::new();
    let fit_stream = SeededStream::new(spec.fit_seed, 0);
    let mut add = |name: String,
                   kind: NodeKind,
                   period: usize,
                   rows: Vec<usize>,
                   y: Vec<f64>,
                   hist: &Vec<Vec<f64>>,
                   hist_names: &Vec<String>,
                   treatment_inputs: &Vec<usize>|
     -> Result<()> {
        let idx = nodes.len();
        if rows.is_empty() {
            return Err(Error::TooFewUnits {
                needed: 1,
                available: 0,
            });
        }
        let p = hist.len();
        let x = DMatrix::from_fn(rows.len(), p, |r, j| hist[j][rows[r]]);
        let yr: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
        let (mut model, lambda, family, sd) = fit_node(&x, &yr, &spec.lambda_grid, &fit_stream.derive(idx as u64))?;
        if let (Some(beta), NodeKind::Covariate | NodeKind::Outcome) = (spec.treatment_override, kind) {
            for (k, (j, l)) in interaction_terms(p).into_iter().enumerate() {
                let involves = treatment_inputs.contains(&j) || l.is_some_and(|l| treatment_inputs.contains(&l));
                if involves {
                    model.coefficients[k + 1] = if l.is_none() { beta } else { 0.0 };
                }
            }
        }
        let model = model.with_names(hist_names.clone());
        nodes.push(GenerativeNode {
            name,
            kind,
            period,
            family,
            lambda,
            sd,
            inputs: p,
            input_names: hist_names.clone(),
            model,
        });
        Ok(())
    };
    for t in 0..periods {
        let at_risk: Vec<usize> = (0..n).filter(|&i| panel.present[t][i]).collect();
        let a_t = treatment[t].clone();
        add(
            format!("{}[{t}]", layout.treatment),
            NodeKind::Treatment,
            t,
            at_risk.clone(),
            a_t.clone(),
            &hist,
            &hist_names,
            &treatment_inputs,
        )?;
        if let (Some(c), Some(name)) = (panel.censoring.as_ref(), layout.censoring.as_ref()) {
            // Censoring conditions on A(t) as well.
            let mut h = hist.clone();
            h.push(a_t.clone());
            let mut hn = hist_names.clone();
            hn.push(format!("{}[{t}]", layout.treatment));
            add(format!("{name}[{t}]"), NodeKind::Censoring, t, at_risk.clone(), c[t].clone(), &h, &hn, &treatment_inputs)?;
        }
        treatment_inputs.push(hist.len());
        hist.push(a_t);
        hist_names.push(format!("{}[{t}]", layout.treatment));
        if t + 1 < periods {
            let next: Vec<usize> = (0..n).filter(|&i| uncensored_after(t, i)).collect();
            for j in 0..panel.covariates[t + 1].ncols() {
                let v: Vec<f64> = panel.covariates[t + 1].column(j).iter().copied().collect();
                add(
                    format!("{}[{}]", layout.time_varying[j].0, t + 1),
                    NodeKind::Covariate,
                    t + 1,
                    next.clone(),
                    v.clone(),
                    &hist,
                    &hist_names,
                    &treatment_inputs,
                )?;
                hist.push(v);
                hist_names.push(format!("{}[{}]", layout.time_varying[j].0, t + 1));
            }
        }
    }
    let done: Vec<usize> = (0..n).filter(|&i| uncensored_after(periods - 1, i)).collect();
    add(
        layout.outcome.clone(),
        NodeKind::Outcome,
        periods - 1,
        done,
        panel.outcome.clone(),
        &hist,
        &hist_names,
        &treatment_inputs,
    )?;

    let mut gen = OutcomeBlindGenerator {
        periods,
        nodes,
        exposure_shift: 0.0,
        pool,
        pool_names,
        layout,
    };
    if let Some(target) = spec.exposure_prevalence {
        gen.exposure_shift = gen.solve_shift(target)?;
    }
    Ok(gen)
}

/// Simulation state for a batch of trajectories.
struct Batch {
    hist: Vec<Vec<f64>>,
    active: Vec<bool>,
    censored_at: Vec<Option<usize>>,
    record: Vec<Vec<f64>>,
}

enum Mode<'a> {
    Observe,
    Intervene(&'a Regimen),
}

impl OutcomeBlindGenerator {
    pub fn n_source(&self) -> usize {
        self.pool.nrows()
    }

    fn solve_shift(&self, target: f64) -> Result<f64> {
        if !(target > 0.0 && target < 1.0) {
            return Err(Error::Config(format!("exposure prevalence {target} outside (0,1)")));
        }
        let node = &self.nodes[0];
        let x = self.pool.columns(0, node.inputs).into_owned();
        let eta = node.model.linear_predictor(&x)?;
        let prevalence = |d: f64| mean(&eta.iter().map(|e| expit(e + d)).collect::<Vec<_>>());
        let (mut lo, mut hi) = (-30.0, 30.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if prevalence(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    fn simulate(&self, rows: &[usize], stream: &SeededStream, mode: Mode) -> Result<Batch> {
        let m = rows.len();
        let mut rng = stream.rng();
        let mut hist: Vec<Vec<f64>> = (0..self.pool.ncols())
            .map(|j| rows.iter().map(|&r| self.pool[(r, j)]).collect())
            .collect();
        let mut active = vec![true; m];
        let mut censored_at = vec![None; m];
        let mut record = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let idx: Vec<usize> = (0..m).filter(|&i| active[i]).collect();
            let mut values = vec![f64::NAN; m];
            let forced = match (&mode, node.kind) {
                (Mode::Intervene(r), NodeKind::Treatment) => Some(r.treatment[node.period] as f64),
                (Mode::Intervene(_), NodeKind::Censoring) => Some(0.0),
                _ => None,
            };
            if let Some(v) = forced {
                for &i in &idx {
                    values[i] = v;
                }
            } else if !idx.is_empty() {
                let mut x = DMatrix::from_fn(idx.len(), node.inputs, |r, j| {
                    if j < hist.len() {
                        hist[j][idx[r]]
                    } else {
                        f64::NAN
                    }
                });
                if node.kind == NodeKind::Censoring {
                    // Last input is the current treatment, not yet in history.
                    let a: Vec<f64> = record.last().cloned().unwrap_or_default();
                    for (r, &i) in idx.iter().enumerate() {
                        x[(r, node.inputs - 1)] = a[i];
                    }
                }
                let shift = if node.kind == NodeKind::Treatment { self.exposure_shift } else { 0.0 };
                let mu = node.mean(&x, shift)?;
                let rao_blackwell = matches!(mode, Mode::Intervene(_)) && node.kind == NodeKind::Outcome;
                for (r, &i) in idx.iter().enumerate() {
                    values[i] = if rao_blackwell {
                        mu[r]
                    } else {
                        match node.family {
                            Family::Binomial => rng.bernoulli(mu[r]) as u8 as f64,
                            Family::Gaussian => rng.normal(mu[r], node.sd),
                        }
                    };
                }
            }
            match node.kind {
                NodeKind::Censoring => {
                    for &i in &idx {
                        if values[i] == 1.0 {
                            active[i] = false;
                            censored_at[i] = Some(node.period);
                        }
                    }
                }
                NodeKind::Outcome => {}
                _ => hist.push(values.clone()),
            }
            record.push(values);
        }
        Ok(Batch {
            hist,
            active,
            censored_at,
            record,
        })
    }

    /// Draws a synthetic dataset of `n` subjects.
    pub fn generate(&self, n: usize, stream: &SeededStream) -> Result<Dataset> {
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let rows = resample_indices(self.n_source(), n, &stream.derive(0));
        let batch = self.simulate(&rows, &stream.derive(1), Mode::Observe)?;
        self.to_dataset(&batch)
    }

    fn node_values<'b>(&self, batch: &'b Batch, kind: NodeKind, period: usize) -> Option<&'b Vec<f64>> {
        self.nodes
            .iter()
            .position(|nd| nd.kind == kind && nd.period == period)
            .map(|k| &batch.record[k])
    }

    fn to_dataset(&self, batch: &Batch) -> Result<Dataset> {
        let l = &self.layout;
        let m = batch.active.len();
        let y = self
            .node_values(batch, NodeKind::Outcome, self.periods - 1)
            .cloned()
            .unwrap_or_default();
        let opt = |v: f64| if v.is_nan() { None } else { Some(v) };
        let base_kind = |k: ColumnKind| if k == ColumnKind::Binary { ColumnKind::Binary } else { ColumnKind::Real };
        match l.study {
            StudyType::PointTreatment => {
                let mut cols = Vec::new();
                for (j, (name, kind)) in l.baseline.iter().enumerate() {
                    cols.push(Column::new(name, ColumnRole::Baseline, base_kind(*kind), batch.hist[j].iter().map(|v| opt(*v)).collect()));
                }
                let a = self.node_values(batch, NodeKind::Treatment, 0).cloned().unwrap_or_default();
                cols.push(Column::new(&l.treatment, ColumnRole::Treatment, ColumnKind::Binary, a.iter().map(|v| opt(*v)).collect()));
                cols.push(Column::new(&l.outcome, ColumnRole::Outcome, ColumnKind::Real, y.iter().map(|v| opt(*v)).collect()));
                Dataset::from_columns(cols)
            }
            _ => {
                let nb = l.baseline.len();
                let nl = l.time_varying.len();
                let mut ids = Vec::new();
                let mut time = Vec::new();
                let mut base: Vec<Vec<Option<f64>>> = vec![Vec::new(); nb];
                let mut tv: Vec<Vec<Option<f64>>> = vec![Vec::new(); nl];
                let mut a_col = Vec::new();
                let mut c_col = Vec::new();
                let mut y_col = Vec::new();
                let tv_index = |j: usize, t: usize| -> Option<&Vec<f64>> {
                    if t == 0 {
                        Some(&batch.hist[nb + j])
                    } else {
                        let name = format!("{}[{t}]", l.time_varying[j].0);
                        self.nodes.iter().position(|nd| nd.name == name).map(|k| &batch.record[k])
                    }
                };
                for i in 0..m {
                    let last = batch.censored_at[i].unwrap_or(self.periods - 1);
                    for t in 0..=last {
                        ids.push(format!("s{i}"));
                        time.push(Some(t as f64));
                        for (j, b) in base.iter_mut().enumerate() {
                            b.push(opt(batch.hist[j][i]));
                        }
                        for (j, col) in tv.iter_mut().enumerate() {
                            col.push(tv_index(j, t).and_then(|v| opt(v[i])));
                        }
                        a_col.push(self.node_values(batch, NodeKind::Treatment, t).and_then(|v| opt(v[i])));
                        c_col.push(self.node_values(batch, NodeKind::Censoring, t).and_then(|v| opt(v[i])));
                        let terminal = t == self.periods - 1 && batch.censored_at[i].is_none();
                        y_col.push(if terminal { opt(y[i]) } else { None });
                    }
                }
                let mut cols = vec![
                    Column::ids(l.subject.as_deref().unwrap_or("id"), ColumnRole::SubjectId, &ids),
                    Column::new(l.time.as_deref().unwrap_or("time"), ColumnRole::TimeIndex, ColumnKind::Real, time),
                ];
                for (j, (name, kind)) in l.baseline.iter().enumerate() {
                    cols.push(Column::new(name, ColumnRole::Baseline, base_kind(*kind), std::mem::take(&mut base[j])));
                }
                for (j, (name, kind)) in l.time_varying.iter().enumerate() {
                    cols.push(Column::new(name, ColumnRole::TimeVarying, base_kind(*kind), std::mem::take(&mut tv[j])));
                }
                cols.push(Column::new(&l.treatment, ColumnRole::Treatment, ColumnKind::Binary, a_col));
                if let Some(c) = &l.censoring {
                    cols.push(Column::new(c, ColumnRole::Censoring, ColumnKind::Binary, c_col));
                }
                cols.push(Column::new(&l.outcome, ColumnRole::Outcome, ColumnKind::Real, y_col));
                Dataset::from_columns(cols)
            }
        }
    }

    pub fn study_type(&self) -> StudyType {
        self.layout.study
    }

    /// Mean terminal outcome per trajectory under `regimen`, Rao-Blackwellized.
    fn counterfactual(&self, regimen: &Regimen, m: usize, stream: &SeededStream) -> Result<Vec<f64>> {
        if regimen.treatment.len() != self.periods {
            return Err(Error::DimensionMismatch(format!(
                "regimen covers {} periods, generator has {}",
                regimen.treatment.len(),
                self.periods
            )));
        }
        let chunks = m.div_ceil(TRUTH_CHUNK);
        let parts: Vec<Result<Vec<f64>>> = (0..chunks)
            .into_par_iter()
            .map(|c| {
                let size = TRUTH_CHUNK.min(m - c * TRUTH_CHUNK);
                let s = stream.derive(c as u64);
                let rows = resample_indices(self.n_source(), size, &s.derive(0));
                let batch = self.simulate(&rows, &s.derive(1), Mode::Intervene(regimen))?;
                Ok(batch.record.last().cloned().unwrap_or_default())
            })
            .collect();
        let mut out = Vec::with_capacity(m);
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    /// Monte Carlo g-formula truth with common random numbers across arms.
    pub fn compute_truth(
        &self,
        regimen1: &Regimen,
        regimen0: &Regimen,
        scale: EffectScale,
        m: usize,
        stream: &SeededStream,
    ) -> Result<TrueEffect> {
        if m < 2 {
            return Err(Error::TooFewUnits { needed: 2, available: m });
        }
        let y1 = self.counterfactual(regimen1, m, stream)?;
        let y0 = self.counterfactual(regimen0, m, stream)?;
        let (mu1, mu0) = (mean(&y1), mean(&y0));
        let (v1, v0) = (sample_variance(&y1) / m as f64, sample_variance(&y0) / m as f64);
        let (value, mc_se) = match scale {
            EffectScale::Difference => (mu1 - mu0, (v1 + v0).sqrt()),
            EffectScale::Ratio => {
                if mu0 <= 0.0 {
                    return Err(Error::ZeroDenominator);
                }
                let r = mu1 / mu0;
                (r, r * (v1 / (mu1 * mu1) + v0 / (mu0 * mu0)).sqrt())
            }
        };
        Ok(TrueEffect {
            scale,
            value,
            mc_se,
            method: TruthMethod::MonteCarloGformula,
        })
    }
}

/// One treatment-blind draw together with the pre-deletion endpoint of each
/// cluster (in order of first appearance).
#[derive(Debug, Clone)]
pub struct TreatmentBlindDraw {
    pub data: Dataset,
    pub truth: TrueEffect,
    pub endpoint_truth: Vec<f64>,
}

/// Permutes cluster treatment (within strata) and draws measurement
/// indicators from the mechanism; outcomes are blanked where unmeasured.
pub fn treatment_blind_generate(
    source: &Dataset,
    spec: &TreatmentBlindSpec,
    scale: EffectScale,
    stream: &SeededStream,
) -> Result<TreatmentBlindDraw> {
    let clusters = source.clusters().ok_or_else(|| Error::SchemaMismatch {
        column: "<cluster_id>".into(),
        detail: "treatment-blind generation needs clustered data".into(),
    })?;
    let a = source.role_column(ColumnRole::Treatment)?;
    let y = source.role_column(ColumnRole::Outcome)?;
    let k = clusters.len();
    let mut arm: Vec<f64> = Vec::with_capacity(k);
    for (g, rows) in clusters.members.iter().enumerate() {
        let v = a.values[rows[0]].ok_or_else(|| Error::DomainViolation {
            column: a.name.clone(),
            row: rows[0],
            detail: "missing treatment".into(),
        })?;
        if rows.iter().any(|&r| a.values[r] != Some(v)) {
            return Err(Error::DomainViolation {
                column: a.name.clone(),
                row: rows[0],
                detail: format!("treatment varies within cluster `{}`", clusters.labels[g]),
            });
        }
        arm.push(v);
    }
    let strata: Vec<String> = match &spec.strata {
        None => vec![String::new(); k],
        Some(name) => {
            let c = source.require(name)?;
            clusters.members.iter().map(|rows| c.label(rows[0])).collect()
        }
    };
    let mut rng = stream.derive(0).rng();
    let mut levels: Vec<&String> = strata.iter().collect();
    levels.sort();
    levels.dedup();
    let mut permuted = arm.clone();
    for level in levels {
        let members: Vec<usize> = (0..k).filter(|&g| &strata[g] == level).collect();
        let mut values: Vec<f64> = members.iter().map(|&g| arm[g]).collect();
        rng.shuffle(&mut values);
        for (g, v) in members.iter().zip(values) {
            permuted[*g] = v;
        }
    }
    let n = source.n_rows();
    let new_a: Vec<Option<f64>> = (0..n).map(|r| Some(permuted[clusters.of_row[r]])).collect();
    let mut data = source.with_values(&a.name, new_a)?;

    let mech = &spec.mechanism;
    let mut eta = vec![mech.intercept; n];
    for (name, b) in &mech.coefficients {
        let col = data
            .column(name)
            .ok_or_else(|| Error::InvalidMechanism(format!("unknown column `{name}`")))?;
        if col.role.is_id() || matches!(col.role, ColumnRole::Outcome | ColumnRole::Measurement | ColumnRole::TimeIndex) {
            return Err(Error::InvalidMechanism(format!("column `{name}` cannot enter the mechanism")));
        }
        for r in 0..n {
            let v = col.values[r].ok_or_else(|| Error::InvalidMechanism(format!("missing `{name}` in row {r}")))?;
            eta[r] += b * v;
        }
    }
    let p: Vec<f64> = eta.iter().map(|e| expit(*e)).collect();
    for (g, rows) in clusters.members.iter().enumerate() {
        let all_zero = rows.iter().all(|&r| p[r] < 1e-12);
        let all_one = rows.iter().all(|&r| p[r] > 1.0 - 1e-12);
        if all_zero || all_one {
            return Err(Error::InvalidMechanism(format!(
                "measurement probability is degenerate in cluster `{}`",
                clusters.labels[g]
            )));
        }
    }
    let mut mrng = stream.derive(1).rng();
    let delta: Vec<Option<f64>> = (0..n)
        .map(|r| {
            let d = mrng.bernoulli(p[r]) && y.values[r].is_some();
            Some(d as u8 as f64)
        })
        .collect();
    let new_y: Vec<Option<f64>> = (0..n).map(|r| if delta[r] == Some(1.0) { y.values[r] } else { None }).collect();
    data = match data.first_with_role(ColumnRole::Measurement).map(|c| c.name.clone()) {
        Some(mname) => data.with_values(&mname, delta)?,
        None => {
            let mut cols = data.columns().to_vec();
            cols.push(Column::new("delta", ColumnRole::Measurement, ColumnKind::Binary, delta));
            Dataset::from_columns(cols)?
        }
    };
    data = data.with_values(&y.name, new_y)?;
    let endpoint_truth = clusters
        .members
        .iter()
        .map(|rows| {
            let v: Vec<f64> = rows.iter().filter_map(|&r| y.values[r]).collect();
            mean(&v)
        })
        .collect();
    Ok(TreatmentBlindDraw {
        data,
        truth: TrueEffect::null(scale),
        endpoint_truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::validate_schema;

    fn point_source(n: usize, seed: u64, pa: impl Fn(f64) -> f64) -> Dataset {
        let mut rng = SeededStream::new(seed, 0).rng();
        let mut w1 = Vec::new();
        let mut w2 = Vec::new();
        let mut a = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            let x1 = rng.bernoulli(0.4) as u8 as f64;
            let x2 = rng.normal(0.0, 1.0);
            let ai = rng.bernoulli(pa(x1)) as u8 as f64;
            let yi = rng.bernoulli(expit(-1.0 + 0.8 * x1 + 0.5 * x2 + 0.7 * ai)) as u8 as f64;
            w1.push(x1);
            w2.push(x2);
            a.push(ai);
            y.push(yi);
        }
        Dataset::from_columns(vec![
            Column::new("w1", ColumnRole::Baseline, ColumnKind::Binary, w1.into_iter().map(Some).collect()),
            Column::numeric("w2", ColumnRole::Baseline, &w2),
            Column::numeric("a", ColumnRole::Treatment, &a),
            Column::numeric("y", ColumnRole::Outcome, &y),
        ])
        .unwrap()
    }

    #[test]
    fn recovers_randomized_treatment() {
        let src = point_source(5000, 1, |_| 0.5);
        let g = fit_generative_models(&src, StudyType::PointTreatment, &OutcomeBlindSpec::default()).unwrap();
        let node = &g.nodes[0];
        let x = g.pool.columns(0, node.inputs).into_owned();
        let p = node.mean(&x, 0.0).unwrap();
        assert!(p.iter().all(|v| (v - 0.5).abs() < 0.02), "{:?}", p.iter().fold((1.0f64, 0.0f64), |a, v| (a.0.min(*v), a.1.max(*v))));
    }

    #[test]
    fn refit_is_deterministic_and_generates_valid_data() {
        let src = point_source(400, 2, |w| 0.3 + 0.4 * w);
        let spec = OutcomeBlindSpec::default();
        let g1 = fit_generative_models(&src, StudyType::PointTreatment, &spec).unwrap();
        let g2 = fit_generative_models(&src, StudyType::PointTreatment, &spec).unwrap();
        for (a, b) in g1.nodes.iter().zip(&g2.nodes) {
            assert_eq!(a.model.coefficients, b.model.coefficients);
        }
        let s = SeededStream::new(5, 1);
        let d = g1.generate(300, &s).unwrap();
        assert!(validate_schema(&d, StudyType::PointTreatment).is_empty());
        assert_eq!(d.to_csv_string(), g1.generate(300, &s).unwrap().to_csv_string());
        // Baseline rows come from the source.
        let src_rows: Vec<(u64, u64)> = (0..400)
            .map(|i| (src.column("w1").unwrap().values[i].unwrap().to_bits(), src.column("w2").unwrap().values[i].unwrap().to_bits()))
            .collect();
        for i in 0..300 {
            let r = (d.column("w1").unwrap().values[i].unwrap().to_bits(), d.column("w2").unwrap().values[i].unwrap().to_bits());
            assert!(src_rows.contains(&r));
        }
    }

    #[test]
    fn degenerate_censoring_column_predicts_floor() {
        let mut rng = SeededStream::new(3, 0).rng();
        let n = 300;
        let mut ids = Vec::new();
        let (mut w, mut t, mut a, mut c, mut l, mut y) = (vec![], vec![], vec![], vec![], vec![], vec![]);
        for i in 0..n {
            let wi = rng.bernoulli(0.5) as u8 as f64;
            for tt in 0..2 {
                ids.push(format!("p{i}"));
                w.push(wi);
                t.push(tt as f64);
                a.push(rng.bernoulli(0.5) as u8 as f64);
                c.push(0.0);
                l.push(rng.bernoulli(0.4) as u8 as f64);
                y.push(if tt == 1 { Some(rng.bernoulli(0.3) as u8 as f64) } else { None });
            }
        }
        let src = Dataset::from_columns(vec![
            Column::ids("id", ColumnRole::SubjectId, &ids),
            Column::numeric("t", ColumnRole::TimeIndex, &t),
            Column::numeric("w", ColumnRole::Baseline, &w),
            Column::numeric("l", ColumnRole::TimeVarying, &l),
            Column::numeric("a", ColumnRole::Treatment, &a),
            Column::numeric("c", ColumnRole::Censoring, &c),
            Column::new("y", ColumnRole::Outcome, ColumnKind::Binary, y),
        ])
        .unwrap();
        let g = fit_generative_models(&src, StudyType::Longitudinal, &OutcomeBlindSpec::default()).unwrap();
        let cnode = g.nodes.iter().find(|n| n.kind == NodeKind::Censoring).unwrap();
        let x = DMatrix::from_fn(50, cnode.inputs, |i, j| ((i + j) % 2) as f64);
        assert!(cnode.mean(&x, 0.0).unwrap().iter().all(|p| *p <= 1e-4 + 1e-15));
        let d = g.generate(100, &SeededStream::new(1, 1)).unwrap();
        assert!(validate_schema(&d, StudyType::Longitudinal).is_empty());
        let panel = Panel::from_dataset(&d).unwrap();
        assert_eq!(panel.n(), 100);
        let truth = g
            .compute_truth(&Regimen::constant(1, 2), &Regimen::constant(0, 2), EffectScale::Difference, 20_000, &SeededStream::new(2, 2))
            .unwrap();
        assert!(truth.mc_se > 0.0);
    }

    #[test]
    fn identical_regimens_give_exact_null() {
        let src = point_source(300, 4, |w| 0.3 + 0.4 * w);
        let g = fit_generative_models(&src, StudyType::PointTreatment, &OutcomeBlindSpec::default()).unwrap();
        let r = Regimen::constant(1, 1);
        let t = g.compute_truth(&r, &r, EffectScale::Difference, 10_000, &SeededStream::new(9, 9)).unwrap();
        assert_eq!(t.value, 0.0);
    }

    #[test]
    fn zero_override_gives_null_truth() {
        let src = point_source(300, 5, |w| 0.3 + 0.4 * w);
        let spec = OutcomeBlindSpec {
            treatment_override: Some(0.0),
            ..Default::default()
        };
        let g = fit_generative_models(&src, StudyType::PointTreatment, &spec).unwrap();
        let t = g
            .compute_truth(&Regimen::constant(1, 1), &Regimen::constant(0, 1), EffectScale::Difference, 10_000, &SeededStream::new(9, 9))
            .unwrap();
        assert!(t.value.abs() <= t.mc_se.max(1e-15));
    }

    #[test]
    fn truth_matches_mixture_over_source() {
        let src = point_source(500, 6, |w| 0.3 + 0.4 * w);
        let g = fit_generative_models(&src, StudyType::PointTreatment, &OutcomeBlindSpec::default()).unwrap();
        let ynode = g.nodes.last().unwrap();
        let exact = |a: f64| {
            let x = DMatrix::from_fn(500, ynode.inputs, |i, j| if j < 2 { g.pool[(i, j)] } else { a });
            mean(&ynode.mean(&x, 0.0).unwrap())
        };
        let oracle = exact(1.0) - exact(0.0);
        let t = g
            .compute_truth(&Regimen::constant(1, 1), &Regimen::constant(0, 1), EffectScale::Difference, 100_000, &SeededStream::new(3, 3))
            .unwrap();
        assert!((t.value - oracle).abs() < 3.0 * t.mc_se, "{} vs {oracle} ({})", t.value, t.mc_se);
    }

    #[test]
    fn mc_se_scales_with_root_m() {
        let src = point_source(300, 7, |w| 0.3 + 0.4 * w);
        let g = fit_generative_models(&src, StudyType::PointTreatment, &OutcomeBlindSpec::default()).unwrap();
        let (r1, r0) = (Regimen::constant(1, 1), Regimen::constant(0, 1));
        let mut ratios = Vec::new();
        for s in 0..5 {
            let a = g.compute_truth(&r1, &r0, EffectScale::Difference, 20_000, &SeededStream::new(s, 0)).unwrap();
            let b = g.compute_truth(&r1, &r0, EffectScale::Difference, 80_000, &SeededStream::new(s, 1)).unwrap();
            ratios.push(b.mc_se / a.mc_se);
        }
        assert!(ratios.iter().all(|r| (r - 0.5).abs() < 0.05), "{ratios:?}");
    }

    #[test]
    fn synthetic_prevalence_tracks_source() {
        let src = point_source(400, 8, |w| 0.3 + 0.4 * w);
        let g = fit_generative_models(&src, StudyType::PointTreatment, &OutcomeBlindSpec::default()).unwrap();
        let source_prev = mean(&src.column("y").unwrap().dense());
        let prevs: Vec<f64> = (0..100)
            .map(|r| mean(&g.generate(400, &SeededStream::new(10, r)).unwrap().column("y").unwrap().dense()))
            .collect();
        assert!((mean(&prevs) - source_prev).abs() < 0.03);
    }

    #[test]
    fn exposure_shift_hits_target() {
        let src = point_source(400, 9, |w| 0.3 + 0.4 * w);
        let spec = OutcomeBlindSpec {
            exposure_prevalence: Some(0.1),
            ..Default::default()
        };
        let g = fit_generative_models(&src, StudyType::PointTreatment, &spec).unwrap();
        let a: Vec<f64> = (0..20)
            .flat_map(|r| g.generate(500, &SeededStream::new(11, r)).unwrap().column("a").unwrap().dense())
            .collect();
        assert!((mean(&a) - 0.1).abs() < 0.02);
    }

    fn cluster_source(k: usize, per: usize) -> Dataset {
        let mut rng = SeededStream::new(12, 0).rng();
        let (mut id, mut a, mut w, mut e, mut y) = (vec![], vec![], vec![], vec![], vec![]);
        for c in 0..k {
            let ec = rng.normal(0.0, 1.0);
            for _ in 0..per {
                id.push(format!("c{c}"));
                a.push((c < k / 2) as u8 as f64);
                w.push(rng.bernoulli(0.5) as u8 as f64);
                e.push(ec);
                y.push(rng.bernoulli(0.4) as u8 as f64);
            }
        }
        Dataset::from_columns(vec![
            Column::ids("clinic", ColumnRole::ClusterId, &id),
            Column::numeric("arm", ColumnRole::Treatment, &a),
            Column::numeric("w", ColumnRole::Baseline, &w),
            Column::numeric("e", ColumnRole::ClusterBaseline, &e),
            Column::numeric("y", ColumnRole::Outcome, &y),
        ])
        .unwrap()
    }

    #[test]
    fn treatment_blind_properties() {
        let src = cluster_source(50, 100);
        let mech = MissingnessMechanism {
            intercept: (0.7f64 / 0.3).ln(),
            coefficients: BTreeMap::new(),
        };
        let spec = TreatmentBlindSpec { strata: None, mechanism: mech };
        let d = treatment_blind_generate(&src, &spec, EffectScale::Ratio, &SeededStream::new(1, 0)).unwrap();
        assert_eq!(d.truth.value, 1.0);
        assert_eq!(d.truth.mc_se, 0.0);
        let treated = |ds: &Dataset| {
            let c = ds.clusters().unwrap();
            let a = ds.column("arm").unwrap();
            c.members.iter().filter(|m| a.values[m[0]] == Some(1.0)).count()
        };
        assert_eq!(treated(&src), treated(&d.data));
        let rate = mean(&d.data.column("delta").unwrap().dense());
        assert!((rate - 0.7).abs() < 0.02);
        assert!(validate_schema(&d.data, StudyType::ClusterTwoStage).is_empty());
        for name in ["w", "e", "clinic"] {
            assert_eq!(src.column(name).unwrap().values, d.data.column(name).unwrap().values);
        }
    }

    #[test]
    fn degenerate_mechanism_rejected() {
        let src = cluster_source(10, 5);
        let mut coefficients = BTreeMap::new();
        coefficients.insert("e".to_string(), 1e6);
        let spec = TreatmentBlindSpec {
            strata: None,
            mechanism: MissingnessMechanism { intercept: 0.0, coefficients },
        };
        assert!(matches!(
            treatment_blind_generate(&src, &spec, EffectScale::Ratio, &SeededStream::new(1, 0)),
            Err(Error::InvalidMechanism(_))
        ));
    }

    #[test]
    fn stratified_permutation_stays_in_stratum() {
        let src = cluster_source(20, 3);
        let pair: Vec<f64> = (0..60).map(|r| ((r / 3) % 10) as f64).collect();
        let mut cols = src.columns().to_vec();
        cols.push(Column::numeric("pair", ColumnRole::ClusterBaseline, &pair));
        let src = Dataset::from_columns(cols).unwrap();
        let spec = TreatmentBlindSpec {
            strata: Some("pair".into()),
            mechanism: MissingnessMechanism { intercept: 1.0, coefficients: BTreeMap::new() },
        };
        for s in 0..10 {
            let d = treatment_blind_generate(&src, &spec, EffectScale::Ratio, &SeededStream::new(s, 0)).unwrap();
            let a = d.data.column("arm").unwrap();
            for p in 0..10 {
                let in_p: Vec<f64> = (0..60).filter(|&r| pair[r] == p as f64).map(|r| a.values[r].unwrap()).collect();
                let src_a: Vec<f64> = (0..60).filter(|&r| pair[r] == p as f64).map(|r| src.column("arm").unwrap().values[r].unwrap()).collect();
                assert_eq!(in_p.iter().sum::<f64>(), src_a.iter().sum::<f64>());
            }
        }
    }
}
