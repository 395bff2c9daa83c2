//! Typed columnar datasets, schema validation and resampling.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededStream;

/// Token for a missing cell in CSV files.
pub const NA: &str = "NA";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnRole {
    /// Individual-level baseline covariate (W).
    Baseline,
    /// Cluster-level baseline covariate (E^c).
    ClusterBaseline,
    Treatment,
    Censoring,
    /// Outcome measurement indicator (Δ).
    Measurement,
    /// Time-varying or post-baseline covariate (L(t) or M).
    TimeVarying,
    Outcome,
    ClusterId,
    TimeIndex,
    SubjectId,
}

impl ColumnRole {
    pub fn is_binary(self) -> bool {
        matches!(
            self,
            ColumnRole::Treatment | ColumnRole::Censoring | ColumnRole::Measurement
        )
    }

    pub fn is_id(self) -> bool {
        matches!(self, ColumnRole::ClusterId | ColumnRole::SubjectId)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Binary,
    Real,
    Categorical,
    /// String identifiers stored as level codes.
    Id,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyType {
    PointTreatment,
    Longitudinal,
    ClusterTwoStage,
}

/// Role assignment for one CSV column, either a bare role or a role with an
/// explicit kind (and reference level for categoricals).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RoleSpec {
    Role(ColumnRole),
    Detailed {
        role: ColumnRole,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        kind: Option<ColumnKind>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reference: Option<String>,
    },
}

impl RoleSpec {
    pub fn role(&self) -> ColumnRole {
        match self {
            RoleSpec::Role(r) => *r,
            RoleSpec::Detailed { role, .. } => *role,
        }
    }

    fn kind(&self) -> ColumnKind {
        let explicit = match self {
            RoleSpec::Role(_) => None,
            RoleSpec::Detailed { kind, .. } => *kind,
        };
        let role = self.role();
        if role.is_id() {
            return ColumnKind::Id;
        }
        if role.is_binary() {
            return ColumnKind::Binary;
        }
        explicit.unwrap_or(ColumnKind::Real)
    }

    fn reference(&self) -> Option<&str> {
        match self {
            RoleSpec::Detailed { reference, .. } => reference.as_deref(),
            RoleSpec::Role(_) => None,
        }
    }
}

/// Mapping from CSV column names to roles. Lives in the study config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub study_type: StudyType,
    pub columns: BTreeMap<String, RoleSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub name: String,
    pub role: ColumnRole,
    pub kind: ColumnKind,
    pub values: Vec<Option<f64>>,
    /// Level labels for `Id` columns; values are indices into this list.
    pub levels: Vec<String>,
}

impl Column {
    pub fn new(name: &str, role: ColumnRole, kind: ColumnKind, values: Vec<Option<f64>>) -> Self {
        Column {
            name: name.to_string(),
            role,
            kind,
            values,
            levels: Vec::new(),
        }
    }

    /// Fully observed numeric column.
    pub fn numeric(name: &str, role: ColumnRole, values: &[f64]) -> Self {
        let kind = if role.is_binary() {
            ColumnKind::Binary
        } else {
            ColumnKind::Real
        };
        Column::new(name, role, kind, values.iter().map(|v| Some(*v)).collect())
    }

    /// Identifier column from string labels.
    pub fn ids<S: AsRef<str>>(name: &str, role: ColumnRole, labels: &[S]) -> Self {
        let mut levels: Vec<String> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        let values = labels
            .iter()
            .map(|l| {
                let l = l.as_ref();
                let code = *index.entry(l.to_string()).or_insert_with(|| {
                    levels.push(l.to_string());
                    levels.len() - 1
                });
                Some(code as f64)
            })
            .collect();
        Column {
            name: name.to_string(),
            role,
            kind: ColumnKind::Id,
            values,
            levels,
        }
    }

    pub fn label(&self, row: usize) -> String {
        match self.values[row] {
            Some(v) if self.kind == ColumnKind::Id => self.levels[v as usize].clone(),
            Some(v) => format_number(v),
            None => NA.to_string(),
        }
    }

    /// Values with missing cells as NaN.
    pub fn dense(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.unwrap_or(f64::NAN)).collect()
    }
}

/// One-hot expansion record for a categorical source column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalExpansion {
    pub source: String,
    pub reference: String,
    pub indicators: Vec<String>,
}

/// Row indices grouped by an identifier column, in order of first appearance.
#[derive(Debug, Clone, PartialEq)]
pub struct Grouping {
    pub labels: Vec<String>,
    pub members: Vec<Vec<usize>>,
    pub of_row: Vec<usize>,
}

impl Grouping {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Immutable validated table.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    columns: Vec<Column>,
    n_rows: usize,
    expansions: Vec<CategoricalExpansion>,
}

impl Dataset {
    pub fn from_columns(columns: Vec<Column>) -> Result<Dataset> {
        let n_rows = columns.first().map(|c| c.values.len()).unwrap_or(0);
        if n_rows == 0 {
            return Err(Error::EmptyDataset);
        }
        let mut seen = std::collections::HashSet::new();
        for c in &columns {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::SchemaMismatch {
                    column: c.name.clone(),
                    detail: "is duplicated".into(),
                });
            }
            if c.values.len() != n_rows {
                return Err(Error::DimensionMismatch(format!(
                    "column `{}` has {} rows, expected {n_rows}",
                    c.name,
                    c.values.len()
                )));
            }
        }
        Ok(Dataset {
            columns,
            n_rows,
            expansions: Vec::new(),
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn expansions(&self) -> &[CategoricalExpansion] {
        &self.expansions
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Column> {
        self.column(name).ok_or_else(|| Error::SchemaMismatch {
            column: name.to_string(),
            detail: "is absent".into(),
        })
    }

    pub fn with_role(&self, role: ColumnRole) -> Vec<&Column> {
        self.columns.iter().filter(|c| c.role == role).collect()
    }

    pub fn first_with_role(&self, role: ColumnRole) -> Option<&Column> {
        self.columns.iter().find(|c| c.role == role)
    }

    pub fn role_column(&self, role: ColumnRole) -> Result<&Column> {
        self.first_with_role(role)
            .ok_or_else(|| Error::SchemaMismatch {
                column: format!("<{role:?}>"),
                detail: "role is not assigned to any column".into(),
            })
    }

    /// Copy with one column's values replaced.
    pub fn with_values(&self, name: &str, values: Vec<Option<f64>>) -> Result<Dataset> {
        if values.len() != self.n_rows {
            return Err(Error::DimensionMismatch(format!(
                "replacement for `{name}` has {} rows, expected {}",
                values.len(),
                self.n_rows
            )));
        }
        let mut out = self.clone();
        let col = out
            .columns
            .iter_mut()
            .find(|c| c.name == name)
            .ok_or_else(|| Error::SchemaMismatch {
                column: name.to_string(),
                detail: "is absent".into(),
            })?;
        col.values = values;
        Ok(out)
    }

    pub fn take_rows(&self, rows: &[usize]) -> Dataset {
        let columns = self
            .columns
            .iter()
            .map(|c| Column {
                values: rows.iter().map(|&r| c.values[r]).collect(),
                ..c.clone()
            })
            .collect();
        Dataset {
            columns,
            n_rows: rows.len(),
            expansions: self.expansions.clone(),
        }
    }

    pub fn grouping(&self, role: ColumnRole) -> Option<Grouping> {
        let col = self.first_with_role(role)?;
        let mut index: HashMap<u64, usize> = HashMap::new();
        let mut labels = Vec::new();
        let mut members: Vec<Vec<usize>> = Vec::new();
        let mut of_row = Vec::with_capacity(self.n_rows);
        for r in 0..self.n_rows {
            let key = col.values[r].map(f64::to_bits).unwrap_or(u64::MAX);
            let g = *index.entry(key).or_insert_with(|| {
                labels.push(col.label(r));
                members.push(Vec::new());
                labels.len() - 1
            });
            members[g].push(r);
            of_row.push(g);
        }
        Some(Grouping {
            labels,
            members,
            of_row,
        })
    }

    pub fn clusters(&self) -> Option<Grouping> {
        self.grouping(ColumnRole::ClusterId)
    }

    pub fn subjects(&self) -> Option<Grouping> {
        self.grouping(ColumnRole::SubjectId)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        let names: Vec<&str> = self.columns.iter().map(|c| c.name.as_str()).collect();
        out.push_str(&names.join(","));
        out.push('\n');
        for r in 0..self.n_rows {
            let cells: Vec<String> = self.columns.iter().map(|c| c.label(r)).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }
}

pub(crate) fn format_number(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// Reads a CSV file and applies the schema's role mapping.
pub fn load_dataset(path: &Path, schema: &Schema) -> Result<Dataset> {
    if !path.exists() {
        return Err(Error::FileNotFound(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)?;
    parse_dataset(&text, schema)
}

/// Same as [`load_dataset`] on in-memory CSV text.
pub fn parse_dataset(text: &str, schema: &Schema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let mut raw: Vec<Vec<String>> = vec![Vec::new(); header.len()];
    for rec in reader.records() {
        let rec = rec?;
        for (j, cell) in rec.iter().enumerate().take(header.len()) {
            raw[j].push(cell.to_string());
        }
    }
    for name in schema.columns.keys() {
        if !header.contains(name) {
            return Err(Error::SchemaMismatch {
                column: name.clone(),
                detail: "is absent from the file".into(),
            });
        }
    }
    let mut columns = Vec::new();
    let mut expansions = Vec::new();
    for (j, name) in header.iter().enumerate() {
        let Some(spec) = schema.columns.get(name) else {
            continue;
        };
        let cells = &raw[j];
        let role = spec.role();
        match spec.kind() {
            ColumnKind::Id => columns.push(Column::ids(name, role, cells)),
            ColumnKind::Categorical => {
                let (cols, exp) = expand_categorical(name, role, cells, spec.reference())?;
                columns.extend(cols);
                expansions.push(exp);
            }
            kind => {
                let mut values = Vec::with_capacity(cells.len());
                for (row, cell) in cells.iter().enumerate() {
                    if cell == NA || cell.is_empty() {
                        values.push(None);
                        continue;
                    }
                    let v: f64 = cell.parse().map_err(|_| Error::DomainViolation {
                        column: name.clone(),
                        row,
                        detail: format!("`{cell}` is not numeric"),
                    })?;
                    values.push(Some(v));
                }
                columns.push(Column::new(name, role, kind, values));
            }
        }
    }
    let mut ds = Dataset::from_columns(columns)?;
    ds.expansions = expansions;
    check_domains(&ds)?;
    let report = validate_schema(&ds, schema.study_type);
    if let Some(f) = report.findings.iter().find(|f| f.kind == FindingKind::MissingRole) {
        return Err(Error::SchemaMismatch {
            column: f.column.clone().unwrap_or_default(),
            detail: f.message.clone(),
        });
    }
    Ok(ds)
}

fn expand_categorical(
    name: &str,
    role: ColumnRole,
    cells: &[String],
    reference: Option<&str>,
) -> Result<(Vec<Column>, CategoricalExpansion)> {
    let mut levels: Vec<String> = cells.iter().filter(|c| *c != NA).cloned().collect();
    levels.sort();
    levels.dedup();
    let reference = match reference {
        Some(r) => {
            if !levels.iter().any(|l| l == r) {
                return Err(Error::SchemaMismatch {
                    column: name.to_string(),
                    detail: format!("reference level `{r}` does not occur"),
                });
            }
            r.to_string()
        }
        None => levels.first().cloned().ok_or_else(|| Error::SchemaMismatch {
            column: name.to_string(),
            detail: "has no observed levels".into(),
        })?,
    };
    let mut cols = Vec::new();
    let mut indicators = Vec::new();
    for level in levels.iter().filter(|l| **l != reference) {
        let ind = format!("{name}={level}");
        let values = cells
            .iter()
            .map(|c| {
                if c == NA {
                    None
                } else {
                    Some(if c == level { 1.0 } else { 0.0 })
                }
            })
            .collect();
        cols.push(Column::new(&ind, role, ColumnKind::Binary, values));
        indicators.push(ind);
    }
    Ok((
        cols,
        CategoricalExpansion {
            source: name.to_string(),
            reference,
            indicators,
        },
    ))
}

/// Hard domain checks applied at load time: binary roles hold {0,1} and
/// outcomes are absent where unmeasured or censored.
fn check_domains(ds: &Dataset) -> Result<()> {
    match domain_findings(ds).into_iter().next() {
        Some(f) => Err(Error::DomainViolation {
            column: f.column.unwrap_or_default(),
            row: f.row.unwrap_or(0),
            detail: f.message,
        }),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FindingKind {
    MissingRole,
    UnexpectedRole,
    NonBinary,
    OutcomeWhenUnobserved,
    TreatmentVariesWithinCluster,
    NonMonotoneCensoring,
    TimeIndexGap,
    OutcomeCount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub kind: FindingKind,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub column: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub row: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.findings.is_empty()
    }
}

fn finding(kind: FindingKind, message: String, column: Option<&str>, row: Option<usize>) -> Finding {
    Finding {
        kind,
        message,
        column: column.map(str::to_string),
        row,
    }
}

fn domain_findings(ds: &Dataset) -> Vec<Finding> {
    let mut out = Vec::new();
    for c in ds.columns.iter().filter(|c| c.role.is_binary()) {
        for (row, v) in c.values.iter().enumerate() {
            match v {
                Some(x) if *x == 0.0 || *x == 1.0 => {}
                Some(x) => out.push(finding(
                    FindingKind::NonBinary,
                    format!("value {} is not in {{0,1}}", format_number(*x)),
                    Some(&c.name),
                    Some(row),
                )),
                None => out.push(finding(
                    FindingKind::NonBinary,
                    "missing value in binary column".into(),
                    Some(&c.name),
                    Some(row),
                )),
            }
        }
    }
    let Some(y) = ds.first_with_role(ColumnRole::Outcome) else {
        return out;
    };
    if let Some(m) = ds.first_with_role(ColumnRole::Measurement) {
        for row in 0..ds.n_rows {
            if m.values[row] == Some(0.0) && y.values[row].is_some() {
                out.push(finding(
                    FindingKind::OutcomeWhenUnobserved,
                    "outcome present although measurement indicator is 0".into(),
                    Some(&y.name),
                    Some(row),
                ));
            }
        }
    }
    if let Some(c) = ds.first_with_role(ColumnRole::Censoring) {
        // Censoring at or before a row's time censors that row's outcome.
        let censored_rows: Vec<bool> = match (ds.subjects(), ds.first_with_role(ColumnRole::TimeIndex)) {
            (Some(subj), Some(time)) => {
                let mut flags = vec![false; ds.n_rows];
                for rows in &subj.members {
                    let mut ordered = rows.clone();
                    ordered.sort_by(|a, b| {
                        let ta = time.values[*a].unwrap_or(f64::NAN);
                        let tb = time.values[*b].unwrap_or(f64::NAN);
                        ta.total_cmp(&tb)
                    });
                    let mut censored = false;
                    for r in ordered {
                        censored |= c.values[r] == Some(1.0);
                        flags[r] = censored;
                    }
                }
                flags
            }
            _ => c.values.iter().map(|v| *v == Some(1.0)).collect(),
        };
        for (row, censored) in censored_rows.into_iter().enumerate() {
            if censored && y.values[row].is_some() {
                out.push(finding(
                    FindingKind::OutcomeWhenUnobserved,
                    "outcome present although censored at or before this time".into(),
                    Some(&y.name),
                    Some(row),
                ));
            }
        }
    }
    out
}

fn required_roles(study: StudyType) -> &'static [ColumnRole] {
    match study {
        StudyType::PointTreatment => &[ColumnRole::Treatment, ColumnRole::Outcome],
        StudyType::Longitudinal => &[
            ColumnRole::SubjectId,
            ColumnRole::TimeIndex,
            ColumnRole::Treatment,
            ColumnRole::Outcome,
        ],
        StudyType::ClusterTwoStage => &[
            ColumnRole::ClusterId,
            ColumnRole::Treatment,
            ColumnRole::Measurement,
            ColumnRole::Outcome,
        ],
    }
}

/// Lists every violated invariant of `ds` for `study`. Never fails.
pub fn validate_schema(ds: &Dataset, study: StudyType) -> ValidationReport {
    let mut findings = Vec::new();
    for role in required_roles(study) {
        if ds.first_with_role(*role).is_none() {
            findings.push(finding(
                FindingKind::MissingRole,
                format!("required role {role:?} is not assigned for {study:?}"),
                None,
                None,
            ));
        }
    }
    if study != StudyType::Longitudinal {
        if let Some(c) = ds.first_with_role(ColumnRole::TimeIndex) {
            findings.push(finding(
                FindingKind::UnexpectedRole,
                "time index is only valid for longitudinal studies".into(),
                Some(&c.name),
                None,
            ));
        }
    }
    if study != StudyType::ClusterTwoStage {
        if let Some(c) = ds.first_with_role(ColumnRole::ClusterId) {
            findings.push(finding(
                FindingKind::UnexpectedRole,
                "cluster id is only valid for cluster studies".into(),
                Some(&c.name),
                None,
            ));
        }
    }
    let outcomes = ds.with_role(ColumnRole::Outcome);
    if outcomes.len() > 1 {
        findings.push(finding(
            FindingKind::OutcomeCount,
            format!("{} outcome columns; expected exactly one", outcomes.len()),
            Some(&outcomes[1].name),
            None,
        ));
    }
    findings.extend(domain_findings(ds));

    if study == StudyType::ClusterTwoStage {
        if let (Some(groups), Some(a)) = (ds.clusters(), ds.first_with_role(ColumnRole::Treatment)) {
            for (g, rows) in groups.members.iter().enumerate() {
                let first = a.values[rows[0]];
                if let Some(&r) = rows.iter().find(|&&r| a.values[r] != first) {
                    findings.push(finding(
                        FindingKind::TreatmentVariesWithinCluster,
                        format!("treatment varies within cluster `{}`", groups.labels[g]),
                        Some(&a.name),
                        Some(r),
                    ));
                }
            }
        }
    }
    if study == StudyType::Longitudinal {
        if let (Some(subj), Some(time)) = (ds.subjects(), ds.first_with_role(ColumnRole::TimeIndex)) {
            let cens = ds.first_with_role(ColumnRole::Censoring);
            for (g, rows) in subj.members.iter().enumerate() {
                let mut ordered: Vec<(f64, usize)> = rows
                    .iter()
                    .map(|&r| (time.values[r].unwrap_or(f64::NAN), r))
                    .collect();
                ordered.sort_by(|a, b| a.0.total_cmp(&b.0));
                for (k, (t, r)) in ordered.iter().enumerate() {
                    if *t != k as f64 {
                        findings.push(finding(
                            FindingKind::TimeIndexGap,
                            format!("subject `{}` has time index {t}, expected {k}", subj.labels[g]),
                            Some(&time.name),
                            Some(*r),
                        ));
                        break;
                    }
                }
                if let Some(c) = cens {
                    if let Some(pos) = ordered.iter().position(|(_, r)| c.values[*r] == Some(1.0)) {
                        if pos + 1 < ordered.len() {
                            findings.push(finding(
                                FindingKind::NonMonotoneCensoring,
                                format!("subject `{}` has records after censoring", subj.labels[g]),
                                Some(&c.name),
                                Some(ordered[pos + 1].1),
                            ));
                        }
                    }
                }
            }
        }
    }
    ValidationReport { findings }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleUnit {
    Row,
    Cluster,
    Subject,
}

/// `n` draws with replacement from `0..n_units`.
pub fn resample_indices(n_units: usize, n: usize, stream: &SeededStream) -> Vec<usize> {
    let mut rng = stream.rng();
    (0..n).map(|_| rng.below(n_units)).collect()
}

/// Draws `n` units with replacement. Rows of a drawn cluster (or subject)
/// stay together; repeated draws of the same unit get a `#k` suffix on their
/// identifier so that copies remain distinct units.
pub fn resample_rows(
    ds: &Dataset,
    n: usize,
    unit: ResampleUnit,
    stream: &SeededStream,
) -> Result<Dataset> {
    if ds.n_rows() == 0 || n == 0 {
        return Err(Error::EmptyDataset);
    }
    let role = match unit {
        ResampleUnit::Row => {
            let idx = resample_indices(ds.n_rows(), n, stream);
            return Ok(ds.take_rows(&idx));
        }
        ResampleUnit::Cluster => ColumnRole::ClusterId,
        ResampleUnit::Subject => ColumnRole::SubjectId,
    };
    let groups = ds.grouping(role).ok_or_else(|| Error::SchemaMismatch {
        column: format!("<{role:?}>"),
        detail: "grouping required for this resampling unit".into(),
    })?;
    let draws = resample_indices(groups.len(), n, stream);
    Ok(take_groups(ds, &groups, &draws, role))
}

/// Concatenates the rows of the listed groups, relabelling repeated copies.
pub fn take_groups(ds: &Dataset, groups: &Grouping, draws: &[usize], role: ColumnRole) -> Dataset {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut copies: HashMap<usize, usize> = HashMap::new();
    for &g in draws {
        let k = copies.entry(g).or_insert(0);
        *k += 1;
        let label = if *k == 1 {
            groups.labels[g].clone()
        } else {
            format!("{}#{}", groups.labels[g], k)
        };
        for &r in &groups.members[g] {
            rows.push(r);
            labels.push(label.clone());
        }
    }
    let mut out = ds.take_rows(&rows);
    let id_name = ds.first_with_role(role).map(|c| c.name.clone()).unwrap_or_default();
    for c in out.columns.iter_mut() {
        if c.name == id_name {
            *c = Column::ids(&id_name, role, &labels);
        }
    }
    out
}
