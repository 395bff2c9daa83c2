//! Study configuration, parallel execution, persistence and report output.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{load_dataset, validate_schema, Dataset, Schema, StudyType};
use crate::error::{Error, Result};
use crate::ltmle::{bootstrap_variance, ltmle_contrast, LtmleConfig, Panel, Regimen};
use crate::metrics::{
    compute_report, select_estimator, sort_records, write_records, Candidate, IterationRecord, MetricsReport,
    RejectionLabel, SelectionReport, SelectionScheme,
};
use crate::plasmode::{
    fit_generative_models, treatment_blind_generate, MissingnessMechanism, OutcomeBlindGenerator,
    OutcomeBlindSpec, TreatmentBlindSpec, TrueEffect, MIN_TRUTH_REPLICATES,
};
use crate::rng::SeededStream;
use crate::superlearner::{default_folds, make_folds};
use crate::tmle::{tmle_ate, EstimateResult, NuisanceConfig, VarianceMethod};
use crate::twostage::{two_stage, EffectScale, TwoStageSpec};

pub const VERSION: &str = concat!("sapsim ", env!("CARGO_PKG_VERSION"));
pub const MIN_ITERATIONS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub path: PathBuf,
    pub schema: Schema,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorConfig {
    OutcomeBlind {
        #[serde(flatten)]
        spec: OutcomeBlindSpec,
        /// Subjects per synthetic dataset; defaults to the source size.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sample_size: Option<usize>,
    },
    TreatmentBlind {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        strata: Option<String>,
        /// Mechanism file, kept apart from the config so analysts can stay
        /// blind to it; its hash goes into the manifest.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mechanism_file: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mechanism: Option<MissingnessMechanism>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EstimatorKind {
    Tmle {
        nuisance: NuisanceConfig,
        #[serde(default)]
        variance: VarianceMethod,
    },
    Ltmle(LtmleConfig),
    TwoStage(TwoStageSpec),
}

impl EstimatorKind {
    pub fn describe(&self) -> String {
        fn variance(v: &VarianceMethod) -> String {
            match v {
                VarianceMethod::InfluenceCurve => "influence-curve variance".into(),
                VarianceMethod::Bootstrap { replicates } => format!("bootstrap variance (B={replicates})"),
                VarianceMethod::CrossValidatedIc => "cross-validated influence-curve variance".into(),
            }
        }
        fn nuisance(n: &NuisanceConfig) -> String {
            format!("Q: {}, g: {}", method_name(&n.outcome), method_name(&n.propensity))
        }
        match self {
            EstimatorKind::Tmle { nuisance: n, variance: v } => format!("TMLE; {}; {}", nuisance(n), variance(v)),
            EstimatorKind::Ltmle(c) => format!(
                "LTMLE; {}; weight bound {}; {}",
                nuisance(&c.nuisance),
                c.weight_bound.map(|b| b.to_string()).unwrap_or_else(|| "none".into()),
                variance(&c.variance)
            ),
            EstimatorKind::TwoStage(s) => format!(
                "Two-Stage TMLE; stage 1 {:?}; {} adjustment candidates; {}",
                s.stage1,
                s.aps.candidates.len(),
                variance(&s.variance)
            ),
        }
    }
}

fn method_name(m: &crate::tmle::NuisanceMethod) -> String {
    use crate::tmle::NuisanceMethod::*;
    match m {
        EmpiricalMean => "empirical mean".into(),
        Saturated => "saturated".into(),
        Known { probability } => format!("known ({probability})"),
        Parametric { learner } => format!("parametric ({learner:?})"),
        SuperLearner(c) => format!("Super Learner ({} learners)", c.library.len()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSpec {
    pub id: String,
    /// Position on each selection axis, e.g. `nuisance` and `variance`.
    #[serde(default)]
    pub axes: BTreeMap<String, String>,
    pub estimator: EstimatorKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimandConfig {
    pub scale: EffectScale,
    /// Treatment regimens compared; default always-treat vs never-treat.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regimen1: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regimen0: Option<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub dataset: DatasetConfig,
    pub generator: GeneratorConfig,
    pub estimand: EstimandConfig,
    pub candidates: Vec<EstimatorSpec>,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Defaults to the observational scheme, or the trial scheme for
    /// cluster studies.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<SelectionScheme>,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    #[serde(default = "default_truth_replicates")]
    pub truth_replicates: usize,
    /// Cross-validation folds for individual-level estimators.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub folds: Option<usize>,
}

fn default_name() -> String {
    "study".into()
}
fn default_iterations() -> usize {
    1000
}
fn default_workers() -> usize {
    1
}
fn default_out() -> PathBuf {
    PathBuf::from("out")
}
fn default_truth_replicates() -> usize {
    MIN_TRUTH_REPLICATES
}

impl StudyConfig {
    pub fn study_type(&self) -> StudyType {
        self.dataset.schema.study_type
    }

    pub fn scheme(&self) -> SelectionScheme {
        self.selection.clone().unwrap_or_else(|| match self.study_type() {
            StudyType::ClusterTwoStage => SelectionScheme::trial(),
            _ => SelectionScheme::observational(),
        })
    }

    pub fn from_json(text: &str) -> Result<StudyConfig> {
        Ok(serde_json::from_str(text)?)
    }

    /// Reads a config file; relative paths inside it are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<StudyConfig> {
        if !path.exists() {
            return Err(Error::FileNotFound(path.to_path_buf()));
        }
        let mut cfg = StudyConfig::from_json(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.dataset.path);
        resolve(&mut cfg.output_dir);
        if let GeneratorConfig::TreatmentBlind {
            mechanism_file: Some(f), ..
        } = &mut cfg.generator
        {
            resolve(f);
        }
        Ok(cfg)
    }

    fn regimens(&self, periods: usize) -> Result<(Regimen, Regimen)> {
        let r1 = self.estimand.regimen1.clone().unwrap_or_else(|| vec![1; periods]);
        let r0 = self.estimand.regimen0.clone().unwrap_or_else(|| vec![0; periods]);
        for r in [&r1, &r0] {
            if r.len() != periods || r.iter().any(|v| *v > 1) {
                return Err(Error::Config(format!(
                    "regimen {r:?} must be {periods} binary entries"
                )));
            }
        }
        Ok((Regimen { treatment: r1 }, Regimen { treatment: r0 }))
    }

    /// Checks that do not need the dataset.
    pub fn validate(&self) -> Result<()> {
        if self.iterations < MIN_ITERATIONS {
            return Err(Error::Config(format!(
                "iterations must be at least {MIN_ITERATIONS}, got {}",
                self.iterations
            )));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.candidates.is_empty() {
            return Err(Error::Config("no candidate estimators".into()));
        }
        let mut seen = BTreeSet::new();
        for c in &self.candidates {
            if c.id.is_empty() || c.id.contains(',') || c.id.contains('\n') {
                return Err(Error::Config(format!("invalid candidate id `{}`", c.id)));
            }
            if !seen.insert(c.id.as_str()) {
                return Err(Error::Config(format!("duplicate candidate id `{}`", c.id)));
            }
            let study = self.study_type();
            let fits = matches!(
                (&c.estimator, study),
                (EstimatorKind::Tmle { .. }, StudyType::PointTreatment)
                    | (EstimatorKind::Ltmle(_), StudyType::PointTreatment | StudyType::Longitudinal)
                    | (EstimatorKind::TwoStage(_), StudyType::ClusterTwoStage)
            );
            if !fits {
                return Err(Error::Config(format!(
                    "candidate `{}` does not apply to a {study:?} study",
                    c.id
                )));
            }
            match &c.estimator {
                EstimatorKind::Tmle { nuisance, variance } => {
                    nuisance.validate()?;
                    if *variance == VarianceMethod::CrossValidatedIc {
                        return Err(Error::Config(format!(
                            "candidate `{}`: cross-validated IC variance applies to two-stage estimators",
                            c.id
                        )));
                    }
                }
                EstimatorKind::Ltmle(l) => l.validate()?,
                EstimatorKind::TwoStage(s) => {
                    s.nuisance.validate()?;
                    s.aps.validate()?;
                    if s.estimand.scale != self.estimand.scale {
                        return Err(Error::Config(format!(
                            "candidate `{}` uses a different effect scale from the study",
                            c.id
                        )));
                    }
                }
            }
        }
        match (&self.generator, self.study_type()) {
            (GeneratorConfig::OutcomeBlind { .. }, StudyType::ClusterTwoStage) => {
                return Err(Error::Config("cluster studies use the treatment-blind generator".into()))
            }
            (GeneratorConfig::TreatmentBlind { .. }, s) if s != StudyType::ClusterTwoStage => {
                return Err(Error::Config("the treatment-blind generator needs a cluster study".into()))
            }
            (GeneratorConfig::OutcomeBlind { .. }, _) if self.truth_replicates < MIN_TRUTH_REPLICATES => {
                return Err(Error::Config(format!(
                    "truth_replicates must be at least {MIN_TRUTH_REPLICATES}"
                )))
            }
            (GeneratorConfig::TreatmentBlind {
                mechanism_file,
                mechanism,
                ..
            }, _) if mechanism_file.is_some() == mechanism.is_some() => {
                return Err(Error::Config("give exactly one of mechanism_file and mechanism".into()))
            }
            _ => {}
        }
        if let Some(s) = &self.selection {
            s.validate()?;
        }
        if self.folds.is_some_and(|v| v < 2) {
            return Err(Error::Config("folds must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum PreparedGenerator {
    OutcomeBlind {
        generator: Box<OutcomeBlindGenerator>,
        sample_size: usize,
        regimens: (Regimen, Regimen),
    },
    TreatmentBlind(TreatmentBlindSpec),
}

/// A validated config with its dataset loaded and generator fitted.
#[derive(Debug, Clone)]
pub struct Study {
    pub config: StudyConfig,
    pub source: Dataset,
    pub generator: PreparedGenerator,
    pub mechanism_sha256: Option<String>,
}

fn schema_error(report: &crate::data::ValidationReport) -> Error {
    let f = &report.findings[0];
    Error::SchemaMismatch {
        column: f.column.clone().unwrap_or_else(|| "<dataset>".into()),
        detail: f.message.clone(),
    }
}

impl Study {
    pub fn prepare(config: StudyConfig) -> Result<Study> {
        config.validate()?;
        let source = load_dataset(&config.dataset.path, &config.dataset.schema)?;
        let study = config.study_type();
        let findings = validate_schema(&source, study);
        if !findings.is_empty() {
            return Err(schema_error(&findings));
        }
        let mut mechanism_sha256 = None;
        let generator = match &config.generator {
            GeneratorConfig::OutcomeBlind { spec, sample_size } => {
                let generator = fit_generative_models(&source, study, spec)?;
                let n = sample_size.unwrap_or(generator.n_source());
                if n == 0 {
                    return Err(Error::Config("sample_size must be positive".into()));
                }
                let regimens = config.regimens(generator.periods)?;
                PreparedGenerator::OutcomeBlind {
                    generator: Box::new(generator),
                    sample_size: n,
                    regimens,
                }
            }
            GeneratorConfig::TreatmentBlind {
                strata,
                mechanism_file,
                mechanism,
            } => {
                let mechanism = match (mechanism_file, mechanism) {
                    (Some(f), _) => {
                        let (m, hash) = MissingnessMechanism::load(f)?;
                        mechanism_sha256 = Some(hash);
                        m
                    }
                    (None, Some(m)) => {
                        mechanism_sha256 = Some(crate::plasmode::sha256_hex(&serde_json::to_vec(m)?));
                        m.clone()
                    }
                    (None, None) => unreachable!("checked by validate"),
                };
                for name in mechanism.coefficients.keys().chain(strata.iter()) {
                    if source.column(name).is_none() {
                        return Err(Error::SchemaMismatch {
                            column: name.clone(),
                            detail: "is not in the dataset".into(),
                        });
                    }
                }
                PreparedGenerator::TreatmentBlind(TreatmentBlindSpec {
                    strata: strata.clone(),
                    mechanism,
                })
            }
        };
        Ok(Study {
            config,
            source,
            generator,
            mechanism_sha256,
        })
    }

    pub fn from_path(path: &Path) -> Result<Study> {
        Study::prepare(StudyConfig::load(path)?)
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.workers)
            .build()
            .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
    }

    fn truth_stream(&self) -> SeededStream {
        SeededStream::new(self.config.seed, 0).derive(u64::MAX)
    }

    pub fn truth(&self) -> Result<TrueEffect> {
        match &self.generator {
            PreparedGenerator::TreatmentBlind(_) => Ok(TrueEffect::null(self.config.estimand.scale)),
            PreparedGenerator::OutcomeBlind { generator, regimens, .. } => {
                let pool = self.pool()?;
                pool.install(|| {
                    generator.compute_truth(
                        &regimens.0,
                        &regimens.1,
                        self.config.estimand.scale,
                        self.config.truth_replicates,
                        &self.truth_stream(),
                    )
                })
            }
        }
    }

    /// Synthetic data for iteration `i` (1-based), with per-cluster
    /// pre-deletion endpoints for treatment-blind studies.
    pub fn generate(&self, i: u64) -> Result<(Dataset, Option<BTreeMap<String, f64>>)> {
        let stream = SeededStream::new(self.config.seed, i).derive(0);
        match &self.generator {
            PreparedGenerator::OutcomeBlind {
                generator, sample_size, ..
            } => Ok((generator.generate(*sample_size, &stream)?, None)),
            PreparedGenerator::TreatmentBlind(spec) => {
                let draw = treatment_blind_generate(&self.source, spec, self.config.estimand.scale, &stream)?;
                let labels = draw.data.clusters().map(|g| g.labels).unwrap_or_default();
                let endpoints = labels.into_iter().zip(draw.endpoint_truth).collect();
                Ok((draw.data, Some(endpoints)))
            }
        }
    }

    fn folds_for(&self, n: usize) -> usize {
        self.config.folds.unwrap_or_else(|| default_folds(n))
    }

    /// Applies one candidate to one dataset.
    pub fn estimate(&self, spec: &EstimatorSpec, data: &Dataset, stream: &SeededStream) -> Result<Outcome> {
        match &spec.estimator {
            EstimatorKind::Tmle { nuisance, variance } => {
                let n = data.n_rows();
                let v = self.folds_for(n);
                let folds = make_folds(n, v, &stream.derive(0), None, None)?;
                let mut est = tmle_ate(data, nuisance, &folds)?;
                if let VarianceMethod::Bootstrap { replicates } = variance {
                    let boot = bootstrap_variance(n, *replicates, &stream.derive(1), |rows, s| {
                        let sample = data.take_rows(rows);
                        let plan = make_folds(rows.len(), v, s, None, Some(rows))?;
                        Ok(tmle_ate(&sample, nuisance, &plan)?.psi)
                    })?;
                    est.set_variance(boot.variance);
                }
                Ok(Outcome::plain(est))
            }
            EstimatorKind::Ltmle(cfg) => {
                let panel = match data.subjects() {
                    Some(_) => Panel::from_dataset(data)?,
                    None => point_panel(data)?,
                };
                let (r1, r0) = self.config.regimens(panel.periods())?;
                let folds = make_folds(panel.n(), self.folds_for(panel.n()), &stream.derive(0), None, None)?;
                let est = ltmle_contrast(&panel, &r1, &r0, cfg, &folds, &stream.derive(1))?;
                Ok(Outcome::plain(est))
            }
            EstimatorKind::TwoStage(s) => {
                let res = two_stage(data, s, stream)?;
                let endpoint_cis = res
                    .clusters
                    .summaries
                    .iter()
                    .map(|c| (c.id.clone(), c.ci))
                    .collect();
                let mut diagnostics_fallbacks = 0;
                let mut positivity = res.estimate.diagnostics.positivity_flag;
                for c in &res.clusters.summaries {
                    diagnostics_fallbacks += c.diagnostics.fallbacks;
                    positivity |= c.diagnostics.positivity_flag;
                }
                let mut out = Outcome::plain(res.estimate);
                out.extra_fallbacks = diagnostics_fallbacks;
                out.positivity |= positivity;
                out.endpoint_cis = Some(endpoint_cis);
                Ok(out)
            }
        }
    }

    /// Every candidate on iteration `i`'s dataset; errors and panics become
    /// failure records.
    pub fn run_iteration(&self, i: u64) -> Vec<IterationRecord> {
        let generated = catch_unwind(AssertUnwindSafe(|| self.generate(i)))
            .unwrap_or_else(|p| Err(Error::Config(format!("panic while generating data: {}", panic_message(&p)))));
        let (data, endpoints) = match generated {
            Ok(d) => d,
            Err(e) => {
                return self
                    .config
                    .candidates
                    .iter()
                    .map(|c| IterationRecord::failure(&c.id, i, format!("data generation: {e}")))
                    .collect()
            }
        };
        self.config
            .candidates
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let stream = SeededStream::new(self.config.seed, i).derive(1 + k as u64);
                let run = catch_unwind(AssertUnwindSafe(|| self.estimate(c, &data, &stream)));
                match run {
                    Ok(Ok(out)) => out.record(&c.id, i, endpoints.as_ref()),
                    Ok(Err(e)) => IterationRecord::failure(&c.id, i, e.to_string()),
                    Err(p) => IterationRecord::failure(&c.id, i, format!("panic: {}", panic_message(&p))),
                }
            })
            .collect()
    }

    pub fn candidates(&self) -> Vec<Candidate> {
        self.config
            .candidates
            .iter()
            .map(|c| Candidate {
                id: c.id.clone(),
                axes: c.axes.clone(),
            })
            .collect()
    }

    /// Truth, all iterations, metrics and selection.
    pub fn run(&self) -> Result<StudyResults> {
        let started = Instant::now();
        let truth = self.truth()?;
        let pool = self.pool()?;
        let r = self.config.iterations as u64;
        let mut records: Vec<IterationRecord> =
            pool.install(|| (1..=r).into_par_iter().flat_map_iter(|i| self.run_iteration(i)).collect());
        sort_records(&mut records);
        let metrics = compute_report(&records, &truth, &self.candidates())?;
        let selection = select_estimator(&metrics, &self.config.scheme())?;
        let manifest = Manifest {
            version: VERSION.to_string(),
            seed: self.config.seed,
            workers: self.config.workers,
            iterations: self.config.iterations,
            mechanism_sha256: self.mechanism_sha256.clone(),
            truth,
            wall_clock_seconds: started.elapsed().as_secs_f64(),
            config: self.config.clone(),
        };
        Ok(StudyResults {
            records,
            metrics,
            selection,
            manifest,
        })
    }
}

fn panic_message(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "unknown".into())
}

/// One-period panel from point-treatment columns.
fn point_panel(data: &Dataset) -> Result<Panel> {
    use crate::data::ColumnRole;
    let (w, _) = crate::tmle::covariate_matrix(data, &[ColumnRole::Baseline])?;
    let n = data.n_rows();
    Panel::new(
        (0..n).map(|i| i.to_string()).collect(),
        w,
        vec![nalgebra::DMatrix::zeros(n, 0)],
        Some(vec![data.role_column(ColumnRole::Treatment)?.dense()]),
        None,
        data.role_column(ColumnRole::Outcome)?.dense(),
    )
}

/// An estimate plus the extra bookkeeping the harness records.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub estimate: EstimateResult,
    pub endpoint_cis: Option<Vec<(String, (f64, f64))>>,
    extra_fallbacks: usize,
    positivity: bool,
}

impl Outcome {
    fn plain(estimate: EstimateResult) -> Self {
        Outcome {
            positivity: estimate.diagnostics.positivity_flag,
            estimate,
            endpoint_cis: None,
            extra_fallbacks: 0,
        }
    }

    fn record(&self, id: &str, i: u64, endpoints: Option<&BTreeMap<String, f64>>) -> IterationRecord {
        let e = &self.estimate;
        if !e.psi.is_finite() || !e.variance.is_finite() {
            return IterationRecord::failure(id, i, "non-finite estimate");
        }
        let mut r = IterationRecord::success(id, i, e.psi, e.variance, e.ci, e.p_value);
        r.ic_mean = Some(e.ic_mean());
        r.fallbacks = (e.diagnostics.fallbacks + self.extra_fallbacks) as u64;
        r.positivity_flag = self.positivity;
        if let (Some(cis), Some(truth)) = (&self.endpoint_cis, endpoints) {
            let mut covered = 0;
            let mut total = 0;
            for (cluster, (lo, hi)) in cis {
                if let Some(t) = truth.get(cluster) {
                    total += 1;
                    if *lo <= *t && *t <= *hi {
                        covered += 1;
                    }
                }
            }
            r.endpoint_covered = Some(covered);
            r.endpoint_total = Some(total);
        }
        r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub seed: u64,
    pub workers: usize,
    pub iterations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mechanism_sha256: Option<String>,
    pub truth: TrueEffect,
    pub wall_clock_seconds: f64,
    pub config: StudyConfig,
}

#[derive(Debug, Clone)]
pub struct StudyResults {
    pub records: Vec<IterationRecord>,
    pub metrics: MetricsReport,
    pub selection: SelectionReport,
    pub manifest: Manifest,
}

pub const ITERATIONS_FILE: &str = "iterations.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const SELECTION_FILE: &str = "selection.json";
pub const REPORT_FILE: &str = "report.md";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

impl StudyResults {
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut csv = Vec::new();
        write_records(&self.records, &mut csv)?;
        std::fs::write(dir.join(ITERATIONS_FILE), csv)?;
        std::fs::write(dir.join(METRICS_FILE), to_json(&self.metrics)?)?;
        std::fs::write(dir.join(SELECTION_FILE), to_json(&self.selection)?)?;
        std::fs::write(
            dir.join(REPORT_FILE),
            emit_report(&self.manifest, &self.metrics, &self.selection, ReportFormat::Markdown)?,
        )?;
        std::fs::write(dir.join(MANIFEST_FILE), to_json(&self.manifest)?)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Markdown,
    Json,
}

fn trim_number(x: f64) -> String {
    let s = format!("{x:.2}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

/// Renders an effect estimate: `risk ratio=1.10, 95%CI: 1.03-1.16` or
/// `5% (95%CI: 2.75-7.25%)`.
pub fn format_effect(scale: EffectScale, psi: f64, ci: (f64, f64)) -> String {
    match scale {
        EffectScale::Ratio => format!("risk ratio={psi:.2}, 95%CI: {:.2}-{:.2}", ci.0, ci.1),
        EffectScale::Difference => {
            let (p, lo, hi) = (trim_number(100.0 * psi), trim_number(100.0 * ci.0), trim_number(100.0 * ci.1));
            let sep = if ci.0 < 0.0 || ci.1 < 0.0 { " to " } else { "-" };
            format!("{p}% (95%CI: {lo}{sep}{hi}%)")
        }
    }
}

fn cell(x: Option<f64>) -> String {
    match x {
        Some(v) if v.is_finite() => format!("{v:.4}"),
        _ => "n/a".into(),
    }
}

/// SAP-style document for a finished study.
pub fn emit_report(
    manifest: &Manifest,
    metrics: &MetricsReport,
    selection: &SelectionReport,
    format: ReportFormat,
) -> Result<String> {
    if format == ReportFormat::Json {
        #[derive(Serialize)]
        struct Doc<'a> {
            manifest: &'a Manifest,
            metrics: &'a MetricsReport,
            selection: &'a SelectionReport,
        }
        return to_json(&Doc {
            manifest,
            metrics,
            selection,
        });
    }
    let cfg = &manifest.config;
    let mut s = String::new();
    let _ = writeln!(s, "# Statistical analysis plan: {}\n", cfg.name);
    let _ = writeln!(s, "## Study\n");
    let _ = writeln!(s, "- Study type: {:?}", cfg.study_type());
    let _ = writeln!(s, "- Source data: `{}`", cfg.dataset.path.display());
    let _ = writeln!(s, "- Effect scale: {:?}", cfg.estimand.scale);
    let _ = writeln!(s, "- Iterations: {}; seed: {}", cfg.iterations, cfg.seed);
    let _ = writeln!(s, "- Software: {}\n", manifest.version);

    let _ = writeln!(s, "## Candidate estimators\n");
    let _ = writeln!(s, "| Order | Id | Axes | Estimator |");
    let _ = writeln!(s, "|---|---|---|---|");
    for (k, c) in cfg.candidates.iter().enumerate() {
        let axes: Vec<String> = c.axes.iter().map(|(a, v)| format!("{a}={v}")).collect();
        let _ = writeln!(s, "| {} | {} | {} | {} |", k + 1, c.id, axes.join(", "), c.estimator.describe());
    }

    let _ = writeln!(s, "\n## Data-generating process\n");
    match &cfg.generator {
        GeneratorConfig::OutcomeBlind { spec, sample_size } => {
            let _ = writeln!(
                s,
                "Outcome-blind plasmode: baseline rows resampled from the source; treatment, post-baseline covariates and outcome drawn from ridge-penalized interaction models (lambda grid {:?}).",
                spec.lambda_grid
            );
            if let Some(b) = spec.treatment_override {
                let _ = writeln!(s, "\nTreatment coefficient fixed at {b}.");
            }
            if let Some(p) = spec.exposure_prevalence {
                let _ = writeln!(s, "\nExposure prevalence calibrated to {p}.");
            }
            if let Some(n) = sample_size {
                let _ = writeln!(s, "\nSynthetic sample size: {n}.");
            }
        }
        GeneratorConfig::TreatmentBlind { strata, .. } => {
            let _ = writeln!(
                s,
                "Treatment-blind plasmode: cluster treatment permuted{}; outcome measurement drawn from a separately held mechanism. The effect is null by design.",
                strata.as_ref().map(|c| format!(" within levels of `{c}`")).unwrap_or_default()
            );
        }
    }
    if let Some(h) = &manifest.mechanism_sha256 {
        let _ = writeln!(s, "\nMechanism SHA-256: `{h}`");
    }
    let t = &manifest.truth;
    let _ = writeln!(
        s,
        "\nTrue effect: {:.6} ({:?} scale, {:?}, MC-SE {:.2e})\n",
        t.value, t.scale, t.method, t.mc_se
    );

    let _ = writeln!(s, "## Performance metrics\n");
    if metrics.estimators.iter().any(|m| m.log_scale) {
        let _ = writeln!(s, "Ratio estimators are summarized on the log scale.\n");
    }
    let label = match metrics.estimators.first().map(|m| m.rejection_label) {
        Some(RejectionLabel::TypeIError) => "Type-I error",
        _ => "Power",
    };
    let _ = writeln!(
        s,
        "| Estimator | Bias | Variance | MSE | Bias/variance | Bias/SE | Variance ratio | Oracle coverage | CI coverage | {label} | Endpoint coverage | Failures |"
    );
    let _ = writeln!(s, "|---|---|---|---|---|---|---|---|---|---|---|---|");
    for m in &metrics.estimators {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {} | {} |",
            m.estimator_id,
            cell(Some(m.bias)),
            cell(Some(m.variance)),
            cell(Some(m.mse)),
            cell(m.bias_variance_ratio),
            cell(m.bias_se_ratio),
            cell(m.variance_ratio),
            cell(Some(m.oracle_coverage)),
            cell(Some(m.ci_coverage)),
            cell(Some(m.rejection_rate)),
            cell(m.endpoint_coverage),
            m.failures
        );
    }
    for i in &metrics.insufficient {
        let _ = writeln!(
            s,
            "\n`{}`: only {} successful iterations ({} failures); not scored.",
            i.estimator_id, i.iterations, i.failures
        );
    }

    let _ = writeln!(s, "\n## Selection ({} scheme)\n", selection.scheme);
    if !selection.disqualified.is_empty() {
        let _ = writeln!(s, "Disqualified for failures: {}\n", selection.disqualified.join(", "));
    }
    for step in &selection.steps {
        let _ = writeln!(s, "Step {} (axis `{}`):\n", step.step, step.axis);
        for g in &step.groups {
            let values: Vec<String> = g.constraint_values.iter().map(|v| format!("{v:.4}")).collect();
            let _ = writeln!(
                s,
                "- {} [{}]: constraints ({}) {}; objective {:.6}",
                g.level,
                g.members.join(", "),
                values.join(", "),
                if g.passed { "met" } else { "not met" },
                g.objective
            );
        }
        if step.relaxed {
            let _ = writeln!(s, "- constraints relaxed to the closest level");
        }
        for n in &step.notes {
            let _ = writeln!(s, "- note: {n}");
        }
        let _ = writeln!(s, "- chosen: {}\n", step.chosen);
    }
    for n in &selection.notes {
        let _ = writeln!(s, "Note: {n}\n");
    }

    let _ = writeln!(s, "## Primary analysis\n");
    match cfg.candidates.iter().find(|c| c.id == selection.winner) {
        Some(c) => {
            let _ = writeln!(s, "`{}`: {}\n", c.id, c.estimator.describe());
        }
        None => {
            let _ = writeln!(s, "`{}`\n", selection.winner);
        }
    }
    let _ = writeln!(s, "## Sensitivity analyses\n");
    if selection.sensitivity.is_empty() {
        let _ = writeln!(s, "None: none met constraints.");
    } else {
        for id in &selection.sensitivity {
            let _ = writeln!(s, "- `{id}`");
        }
    }
    Ok(s)
}

/// Runs the selected primary analysis on the source data and renders the
/// effect line.
pub fn apply_primary(study: &Study, selection: &SelectionReport) -> Result<String> {
    let spec = study
        .config
        .candidates
        .iter()
        .find(|c| c.id == selection.winner)
        .ok_or_else(|| Error::Config(format!("winner `{}` is not a configured candidate", selection.winner)))?;
    let stream = SeededStream::new(study.config.seed, 0).derive(0);
    let est = study.estimate(spec, &study.source, &stream)?;
    Ok(format_effect(study.config.estimand.scale, est.estimate.psi, est.estimate.ci))
}
