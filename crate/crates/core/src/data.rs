//! Datasets, CSV ingestion and export, honest splits, resampling and the
//! synthetic data-generating process.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Bernoulli, Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeds;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("resample error: {0}")]
    Resample(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Numeric,
    Categorical { levels: Vec<String> },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
}

impl FeatureSpec {
    pub fn numeric(name: impl Into<String>) -> Self {
        Self { name: name.into(), kind: FeatureKind::Numeric }
    }

    pub fn categorical(name: impl Into<String>, levels: Vec<String>) -> Self {
        Self { name: name.into(), kind: FeatureKind::Categorical { levels } }
    }

    /// Number of declared levels, or `None` for numeric features.
    pub fn level_count(&self) -> Option<usize> {
        match &self.kind {
            FeatureKind::Numeric => None,
            FeatureKind::Categorical { levels } => Some(levels.len()),
        }
    }
}

/// Ordered list of covariates.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub features: Vec<FeatureSpec>,
}

impl Schema {
    pub fn new(features: Vec<FeatureSpec>) -> Self {
        Self { features }
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    pub fn feature(&self, idx: usize) -> &FeatureSpec {
        &self.features[idx]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Column {
    Numeric(Vec<f64>),
    /// Codes index into the schema's declared levels.
    Categorical(Vec<u32>),
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Column::Numeric(v) => v.len(),
            Column::Categorical(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, rows: &[usize]) -> Column {
        match self {
            Column::Numeric(v) => Column::Numeric(rows.iter().map(|&i| v[i]).collect()),
            Column::Categorical(v) => Column::Categorical(rows.iter().map(|&i| v[i]).collect()),
        }
    }
}

/// A single covariate value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Value {
    Num(f64),
    Level(u32),
}

/// Read access to the covariates of one row.
pub trait FeatureSource {
    fn numeric(&self, feature: usize) -> f64;
    fn level(&self, feature: usize) -> u32;
}

impl FeatureSource for [Value] {
    fn numeric(&self, feature: usize) -> f64 {
        match self[feature] {
            Value::Num(v) => v,
            Value::Level(c) => c as f64,
        }
    }

    fn level(&self, feature: usize) -> u32 {
        match self[feature] {
            Value::Level(c) => c,
            Value::Num(v) => v as u32,
        }
    }
}

/// Covariate columns without treatment or outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    schema: Arc<Schema>,
    columns: Vec<Column>,
    n: usize,
}

impl Frame {
    pub fn new(schema: Schema, columns: Vec<Column>) -> Result<Self> {
        Self::from_shared(Arc::new(schema), columns)
    }

    pub fn from_shared(schema: Arc<Schema>, columns: Vec<Column>) -> Result<Self> {
        if schema.len() != columns.len() {
            return Err(DataError::Schema(format!(
                "{} features declared but {} columns supplied",
                schema.len(),
                columns.len()
            )));
        }
        let n = columns.first().map_or(0, Column::len);
        for (spec, col) in schema.features.iter().zip(&columns) {
            if col.len() != n {
                return Err(DataError::Validation(format!(
                    "column `{}` has {} entries, expected {n}",
                    spec.name,
                    col.len()
                )));
            }
            match (&spec.kind, col) {
                (FeatureKind::Numeric, Column::Numeric(v)) => {
                    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
                        return Err(DataError::Validation(format!("column `{}` row {i}: non-finite value", spec.name)));
                    }
                }
                (FeatureKind::Categorical { levels }, Column::Categorical(codes)) => {
                    if let Some(i) = codes.iter().position(|&c| c as usize >= levels.len()) {
                        return Err(DataError::Validation(format!(
                            "column `{}` row {i}: level code out of range",
                            spec.name
                        )));
                    }
                }
                _ => return Err(DataError::Schema(format!("column `{}` does not match its declared kind", spec.name))),
            }
        }
        Ok(Self { schema, columns, n })
    }

    /// A frame with `n` rows and no covariates.
    pub fn empty(n: usize) -> Self {
        Self { schema: Arc::new(Schema::default()), columns: Vec::new(), n }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn shared_schema(&self) -> Arc<Schema> {
        Arc::clone(&self.schema)
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn column(&self, idx: usize) -> &Column {
        &self.columns[idx]
    }

    pub fn row(&self, i: usize) -> RowRef<'_> {
        RowRef { frame: self, row: i }
    }

    pub fn values(&self, i: usize) -> Vec<Value> {
        self.columns
            .iter()
            .map(|c| match c {
                Column::Numeric(v) => Value::Num(v[i]),
                Column::Categorical(v) => Value::Level(v[i]),
            })
            .collect()
    }

    /// Value of feature `f` in row `i`.
    pub fn values_at(&self, i: usize, f: usize) -> Value {
        match &self.columns[f] {
            Column::Numeric(v) => Value::Num(v[i]),
            Column::Categorical(v) => Value::Level(v[i]),
        }
    }

    pub fn select(&self, rows: &[usize]) -> Frame {
        Frame {
            schema: Arc::clone(&self.schema),
            columns: self.columns.iter().map(|c| c.select(rows)).collect(),
            n: rows.len(),
        }
    }

    /// Concatenates the covariates of `other` after those of `self`.
    pub fn hstack(&self, other: &Frame) -> Result<Frame> {
        if self.n != other.n {
            return Err(DataError::Validation(format!("cannot stack frames with {} and {} rows", self.n, other.n)));
        }
        let mut features = self.schema.features.clone();
        for f in &other.schema.features {
            if features.iter().any(|g| g.name == f.name) {
                return Err(DataError::Schema(format!("duplicate feature name `{}`", f.name)));
            }
            features.push(f.clone());
        }
        let mut columns = self.columns.clone();
        columns.extend(other.columns.iter().cloned());
        Ok(Frame { schema: Arc::new(Schema::new(features)), columns, n: self.n })
    }

    /// Re-expresses this frame in terms of `target`: columns are reordered to
    /// the target's feature order and categorical codes are remapped by level
    /// name. Levels unknown to the target are appended after its declared
    /// levels, so they stay representable and fail later at routing time.
    pub fn conform_to(&self, target: &Schema) -> Result<Frame> {
        let mut features = Vec::with_capacity(target.len());
        let mut columns = Vec::with_capacity(target.len());
        for spec in &target.features {
            let src = self
                .schema
                .index_of(&spec.name)
                .ok_or_else(|| DataError::Schema(format!("missing feature column `{}`", spec.name)))?;
            let src_spec = &self.schema.features[src];
            match (&spec.kind, &src_spec.kind, &self.columns[src]) {
                (FeatureKind::Numeric, FeatureKind::Numeric, col) => {
                    features.push(spec.clone());
                    columns.push(col.clone());
                }
                (
                    FeatureKind::Categorical { levels },
                    FeatureKind::Categorical { levels: src_levels },
                    Column::Categorical(codes),
                ) => {
                    let (levels, map) = remap_levels(levels, src_levels.iter().cloned());
                    features.push(FeatureSpec::categorical(spec.name.clone(), levels));
                    columns.push(Column::Categorical(codes.iter().map(|&c| map[c as usize]).collect()));
                }
                (FeatureKind::Categorical { levels }, FeatureKind::Numeric, Column::Numeric(values)) => {
                    // Numeric-looking level names, e.g. encoded leaf ids.
                    let texts: Vec<String> = values.iter().map(|&v| format_float(v)).collect();
                    let distinct: BTreeSet<&String> = texts.iter().collect();
                    let (levels, _) = remap_levels(levels, distinct.iter().map(|s| (*s).clone()));
                    let codes = texts.iter().map(|t| levels.iter().position(|l| l == t).unwrap() as u32).collect();
                    features.push(FeatureSpec::categorical(spec.name.clone(), levels));
                    columns.push(Column::Categorical(codes));
                }
                _ => {
                    return Err(DataError::Schema(format!(
                        "feature column `{}` is categorical but the model expects numeric",
                        spec.name
                    )))
                }
            }
        }
        Frame::new(Schema::new(features), columns)
    }
}

/// Extends `target` with any unseen source levels and returns the code map
/// from source codes (in iteration order) to target codes.
fn remap_levels(target: &[String], source: impl Iterator<Item = String>) -> (Vec<String>, Vec<u32>) {
    let mut levels = target.to_vec();
    let mut map = Vec::new();
    for lvl in source {
        let code = match levels.iter().position(|l| *l == lvl) {
            Some(c) => c,
            None => {
                levels.push(lvl);
                levels.len() - 1
            }
        };
        map.push(code as u32);
    }
    (levels, map)
}

#[derive(Clone, Copy, Debug)]
pub struct RowRef<'a> {
    frame: &'a Frame,
    row: usize,
}

impl FeatureSource for RowRef<'_> {
    fn numeric(&self, feature: usize) -> f64 {
        match &self.frame.columns[feature] {
            Column::Numeric(v) => v[self.row],
            Column::Categorical(v) => v[self.row] as f64,
        }
    }

    fn level(&self, feature: usize) -> u32 {
        match &self.frame.columns[feature] {
            Column::Categorical(v) => v[self.row],
            Column::Numeric(v) => v[self.row] as u32,
        }
    }
}

/// Covariates, binary treatment, factual outcome and optional ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Frame,
    pub w: Vec<u8>,
    pub y: Vec<f64>,
    pub mu0: Option<Vec<f64>>,
    pub mu1: Option<Vec<f64>>,
    pub ycf: Option<Vec<f64>>,
    pub e: Option<Vec<u8>>,
}

impl Dataset {
    /// Builds and validates a dataset.
    pub fn new(x: Frame, w: Vec<u8>, y: Vec<f64>) -> Result<Self> {
        let ds = Self { x, w, y, mu0: None, mu1: None, ycf: None, e: None };
        ds.validate()?;
        Ok(ds)
    }

    pub fn with_potential_outcomes(mut self, mu0: Vec<f64>, mu1: Vec<f64>) -> Result<Self> {
        self.mu0 = Some(mu0);
        self.mu1 = Some(mu1);
        self.validate()?;
        Ok(self)
    }

    pub fn with_randomized_flag(mut self, e: Vec<u8>) -> Result<Self> {
        self.e = Some(e);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.x.n();
        let check_len = |name: &str, len: usize| -> Result<()> {
            if len != n {
                return Err(DataError::Validation(format!("column `{name}` has {len} entries, expected {n}")));
            }
            Ok(())
        };
        check_len("t", self.w.len())?;
        check_len("yf", self.y.len())?;
        for (name, col) in [("mu0", &self.mu0), ("mu1", &self.mu1), ("ycf", &self.ycf)] {
            if let Some(c) = col {
                check_len(name, c.len())?;
                if c.iter().any(|v| !v.is_finite()) {
                    return Err(DataError::Validation(format!("column `{name}` has non-finite values")));
                }
            }
        }
        if let Some(e) = &self.e {
            check_len("e", e.len())?;
            if e.iter().any(|&v| v > 1) {
                return Err(DataError::Validation("column `e` must be binary".into()));
            }
        }
        if self.w.iter().any(|&v| v > 1) {
            return Err(DataError::Validation("treatment column must be binary".into()));
        }
        if self.y.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Validation("outcome column has non-finite values".into()));
        }
        let treated = self.treated_count();
        if treated == 0 || treated == n {
            return Err(DataError::Validation(format!(
                "dataset needs at least one treated and one control row ({treated} of {n} treated)"
            )));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.x.n()
    }

    pub fn schema(&self) -> &Schema {
        self.x.schema()
    }

    pub fn treated_count(&self) -> usize {
        self.w.iter().filter(|&&w| w == 1).count()
    }

    pub fn control_count(&self) -> usize {
        self.n() - self.treated_count()
    }

    pub fn has_ground_truth(&self) -> bool {
        self.mu0.is_some() && self.mu1.is_some()
    }

    /// True individual effects `mu1 - mu0`, when both columns are present.
    pub fn true_effects(&self) -> Option<Vec<f64>> {
        match (&self.mu0, &self.mu1) {
            (Some(m0), Some(m1)) => Some(m1.iter().zip(m0).map(|(a, b)| a - b).collect()),
            _ => None,
        }
    }

    /// Row subset in the given order. Does not re-check positivity.
    pub fn select(&self, rows: &[usize]) -> Dataset {
        let pick_f = |v: &Vec<f64>| rows.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let pick_u = |v: &Vec<u8>| rows.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Dataset {
            x: self.x.select(rows),
            w: pick_u(&self.w),
            y: pick_f(&self.y),
            mu0: self.mu0.as_ref().map(pick_f),
            mu1: self.mu1.as_ref().map(pick_f),
            ycf: self.ycf.as_ref().map(pick_f),
            e: self.e.as_ref().map(pick_u),
        }
    }

    /// Same rows and outcomes over a different set of covariates.
    pub fn with_features(&self, x: Frame) -> Result<Dataset> {
        if x.n() != self.n() {
            return Err(DataError::Validation(format!(
                "replacement covariates have {} rows, expected {}",
                x.n(),
                self.n()
            )));
        }
        Ok(Dataset { x, ..self.clone() })
    }

    fn has_positivity(&self) -> bool {
        let t = self.treated_count();
        t > 0 && t < self.n()
    }
}

/// Column-role names used when reading and writing CSV files.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnRoles {
    pub treatment: String,
    pub outcome: String,
    pub counterfactual: String,
    pub mu0: String,
    pub mu1: String,
    pub randomized: String,
    /// Extra columns that are neither features nor roles.
    pub ignore: Vec<String>,
}

impl Default for ColumnRoles {
    fn default() -> Self {
        Self {
            treatment: "t".into(),
            outcome: "yf".into(),
            counterfactual: "ycf".into(),
            mu0: "mu0".into(),
            mu1: "mu1".into(),
            randomized: "e".into(),
            ignore: Vec::new(),
        }
    }
}

impl ColumnRoles {
    fn is_reserved(&self, name: &str) -> bool {
        [&self.treatment, &self.outcome, &self.counterfactual, &self.mu0, &self.mu1, &self.randomized]
            .iter()
            .any(|r| r.as_str() == name)
            || self.ignore.iter().any(|r| r == name)
    }
}

struct RawTable {
    header: Vec<String>,
    /// Column-major cells.
    cells: Vec<Vec<String>>,
}

fn read_table(path: &Path) -> Result<RawTable> {
    let mut text = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    parse_table(&text)
}

fn parse_table(text: &str) -> Result<RawTable> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(DataError::Schema("missing header row".into()));
    }
    let mut seen = BTreeSet::new();
    for h in &header {
        if !seen.insert(h) {
            return Err(DataError::Schema(format!("duplicate column `{h}`")));
        }
    }
    let mut cells = vec![Vec::new(); header.len()];
    for (r, rec) in reader.records().enumerate() {
        let rec = rec?;
        for (c, field) in rec.iter().enumerate() {
            let field = field.trim();
            if field.is_empty() || field.eq_ignore_ascii_case("na") || field.eq_ignore_ascii_case("nan") {
                return Err(DataError::Validation(format!(
                    "missing value in column `{}` at data row {}",
                    header[c],
                    r + 1
                )));
            }
            cells[c].push(field.to_string());
        }
    }
    Ok(RawTable { header, cells })
}

fn parse_reals(name: &str, cells: &[String]) -> Result<Vec<f64>> {
    cells
        .iter()
        .enumerate()
        .map(|(i, s)| match s.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(DataError::Validation(format!("column `{name}` row {}: `{s}` is not a finite number", i + 1))),
        })
        .collect()
}

fn parse_binary(name: &str, cells: &[String]) -> Result<Vec<u8>> {
    parse_reals(name, cells)?
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            if v == 0.0 {
                Ok(0)
            } else if v == 1.0 {
                Ok(1)
            } else {
                Err(DataError::Validation(format!("column `{name}` row {}: value {v} is not binary", i + 1)))
            }
        })
        .collect()
}

fn infer_column(name: &str, cells: &[String]) -> (FeatureSpec, Column) {
    let parsed: Option<Vec<f64>> = cells.iter().map(|s| s.parse::<f64>().ok().filter(|v| v.is_finite())).collect();
    match parsed {
        Some(v) => (FeatureSpec::numeric(name), Column::Numeric(v)),
        None => {
            let levels: Vec<String> = cells.iter().collect::<BTreeSet<_>>().into_iter().cloned().collect();
            let index: BTreeMap<&str, u32> = levels.iter().enumerate().map(|(i, l)| (l.as_str(), i as u32)).collect();
            let codes = cells.iter().map(|s| index[s.as_str()]).collect();
            (FeatureSpec::categorical(name, levels), Column::Categorical(codes))
        }
    }
}

fn frame_from_table(table: &RawTable, roles: &ColumnRoles, schema: Option<&Schema>) -> Result<Frame> {
    let mut features = Vec::new();
    let mut columns = Vec::new();
    for (h, cells) in table.header.iter().zip(&table.cells) {
        if roles.is_reserved(h) {
            continue;
        }
        let (spec, col) = infer_column(h, cells);
        features.push(spec);
        columns.push(col);
    }
    let frame = Frame::new(Schema::new(features), columns)?;
    match schema {
        Some(s) => frame.conform_to(s),
        None => Ok(frame),
    }
}

/// Reads a dataset. Reserved role columns are taken from `roles`; every
/// other column is a covariate. When `schema` is given the covariates are
/// conformed to it (missing features are a schema error).
pub fn load_csv(path: impl AsRef<Path>, roles: &ColumnRoles, schema: Option<&Schema>) -> Result<Dataset> {
    let table = read_table(path.as_ref())?;
    dataset_from_table(&table, roles, schema)
}

pub fn parse_csv(text: &str, roles: &ColumnRoles, schema: Option<&Schema>) -> Result<Dataset> {
    dataset_from_table(&parse_table(text)?, roles, schema)
}

fn dataset_from_table(table: &RawTable, roles: &ColumnRoles, schema: Option<&Schema>) -> Result<Dataset> {
    let find = |name: &str| table.header.iter().position(|h| h == name);
    let t_idx = find(&roles.treatment)
        .ok_or_else(|| DataError::Schema(format!("missing treatment column `{}`", roles.treatment)))?;
    let y_idx =
        find(&roles.outcome).ok_or_else(|| DataError::Schema(format!("missing outcome column `{}`", roles.outcome)))?;
    let w = parse_binary(&roles.treatment, &table.cells[t_idx])?;
    let y = parse_reals(&roles.outcome, &table.cells[y_idx])?;
    let opt_real =
        |name: &str| -> Result<Option<Vec<f64>>> { find(name).map(|i| parse_reals(name, &table.cells[i])).transpose() };
    let x = frame_from_table(table, roles, schema)?;
    let x = if x.schema().is_empty() { Frame::empty(w.len()) } else { x };
    let ds = Dataset {
        x,
        w,
        y,
        mu0: opt_real(&roles.mu0)?,
        mu1: opt_real(&roles.mu1)?,
        ycf: opt_real(&roles.counterfactual)?,
        e: find(&roles.randomized).map(|i| parse_binary(&roles.randomized, &table.cells[i])).transpose()?,
    };
    ds.validate()?;
    Ok(ds)
}

/// Reads only the covariates of a CSV file; role columns are ignored and
/// need not be present.
pub fn load_features_csv(path: impl AsRef<Path>, roles: &ColumnRoles, schema: Option<&Schema>) -> Result<Frame> {
    let table = read_table(path.as_ref())?;
    frame_from_table(&table, roles, schema)
}

/// Formats a float with 17 significant digits in `%g` style, trimming
/// trailing zeros. Parsing the output recovers the exact value.
pub fn format_float(v: f64) -> String {
    if v == 0.0 {
        return if v.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let sci = format!("{:.16e}", v);
    let (mant, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("exponent digits");
    let (sign, mant) = match mant.strip_prefix('-') {
        Some(m) => ("-", m),
        None => ("", mant),
    };
    let digits: String = mant.chars().filter(|c| *c != '.').collect();
    if !(-4..17).contains(&exp) {
        let mut m = format!("{}.{}", &digits[..1], &digits[1..]);
        trim_fraction(&mut m);
        return format!("{sign}{m}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs());
    }
    let mut out = String::from(sign);
    if exp < 0 {
        out.push_str("0.");
        out.extend(std::iter::repeat_n('0', (-exp - 1) as usize));
        out.push_str(&digits);
    } else {
        let point = exp as usize + 1;
        out.push_str(&digits[..point]);
        out.push('.');
        out.push_str(&digits[point..]);
    }
    trim_fraction(&mut out);
    out
}

fn trim_fraction(s: &mut String) {
    if s.contains('.') {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
    }
}

/// Writes covariates, then `t`, `yf` and whichever optional role columns
/// are present.
pub fn write_csv<W: Write>(ds: &Dataset, roles: &ColumnRoles, out: W) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().from_writer(out);
    let schema = ds.schema();
    let mut header: Vec<&str> = schema.features.iter().map(|f| f.name.as_str()).collect();
    header.push(&roles.treatment);
    header.push(&roles.outcome);
    let optionals: [(&str, Option<&Vec<f64>>); 3] =
        [(&roles.counterfactual, ds.ycf.as_ref()), (&roles.mu0, ds.mu0.as_ref()), (&roles.mu1, ds.mu1.as_ref())];
    for (name, col) in &optionals {
        if col.is_some() {
            header.push(name);
        }
    }
    if ds.e.is_some() {
        header.push(&roles.randomized);
    }
    wtr.write_record(&header)?;
    let mut record = Vec::with_capacity(header.len());
    for i in 0..ds.n() {
        record.clear();
        for (spec, col) in schema.features.iter().zip(ds.x.columns()) {
            record.push(match (col, &spec.kind) {
                (Column::Numeric(v), _) => format_float(v[i]),
                (Column::Categorical(c), FeatureKind::Categorical { levels }) => levels[c[i] as usize].clone(),
                (Column::Categorical(c), FeatureKind::Numeric) => c[i].to_string(),
            });
        }
        record.push(ds.w[i].to_string());
        record.push(format_float(ds.y[i]));
        for (_, col) in &optionals {
            if let Some(c) = col {
                record.push(format_float(c[i]));
            }
        }
        if let Some(e) = &ds.e {
            record.push(e[i].to_string());
        }
        wtr.write_record(&record)?;
    }
    wtr.flush().map_err(|source| DataError::Io { path: "<output>".into(), source })?;
    Ok(())
}

pub fn save_csv(ds: &Dataset, roles: &ColumnRoles, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    write_csv(ds, roles, std::io::BufWriter::new(file))
}

pub fn to_csv_string(ds: &Dataset, roles: &ColumnRoles) -> String {
    let mut buf = Vec::new();
    write_csv(ds, roles, &mut buf).expect("in-memory write");
    String::from_utf8(buf).expect("utf-8 output")
}

/// Stratified random partition into a structure-building half and an
/// estimation half. `train` receives `round(ratio * n)` rows and each
/// treatment arm is split within one row of `ratio`.
pub fn honest_split(ds: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DataError::Split(format!("ratio {ratio} outside (0, 1)")));
    }
    let n = ds.n();
    let (mut treated, mut control): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| ds.w[i] == 1);
    let (n1, n0) = (treated.len(), control.len());
    if n1 < 2 || n0 < 2 {
        return Err(DataError::Split(format!("{n1} treated and {n0} control rows cannot populate both halves")));
    }
    let total = (ratio * n as f64).round() as usize;
    let k1 = ((ratio * n1 as f64).round() as usize).clamp(1, n1 - 1);
    let k0 = total
        .checked_sub(k1)
        .filter(|k0| (1..n0).contains(k0))
        .ok_or_else(|| DataError::Split(format!("cannot place {total} of {n} rows in the first half")))?;
    let mut rng = seeds::rng(seed);
    treated.shuffle(&mut rng);
    control.shuffle(&mut rng);
    let mut first: Vec<usize> = treated[..k1].iter().chain(&control[..k0]).copied().collect();
    let mut second: Vec<usize> = treated[k1..].iter().chain(&control[k0..]).copied().collect();
    first.sort_unstable();
    second.sort_unstable();
    Ok((ds.select(&first), ds.select(&second)))
}

const RESAMPLE_ATTEMPTS: u64 = 16;

/// Draws `ceil(fraction * n)` distinct rows. Redraws with derived seeds
/// until both arms are present.
pub fn subsample(ds: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    subsample_indices(ds, fraction, seed).map(|rows| ds.select(&rows))
}

pub fn subsample_indices(ds: &Dataset, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DataError::Resample(format!("fraction {fraction} outside (0, 1]")));
    }
    let n = ds.n();
    let size = ((fraction * n as f64).ceil() as usize).clamp(1, n);
    for attempt in 0..RESAMPLE_ATTEMPTS {
        let mut rng = seeds::rng(seeds::mix(seed, attempt));
        let mut rows = index::sample(&mut rng, n, size).into_vec();
        rows.sort_unstable();
        let treated = rows.iter().filter(|&&i| ds.w[i] == 1).count();
        if treated > 0 && treated < rows.len() {
            return Ok(rows);
        }
    }
    Err(DataError::Resample(format!("no draw of {size} rows contained both arms after {RESAMPLE_ATTEMPTS} attempts")))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TauForm {
    Constant {
        value: f64,
    },
    /// `high` where feature `feature` is positive, `low` elsewhere.
    Step {
        feature: usize,
        low: f64,
        high: f64,
    },
}

impl std::str::FromStr for TauForm {
    type Err = String;

    /// `constant:C` or `step:FEATURE:LOW:HIGH`.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |p: &str| p.parse::<f64>().map_err(|_| format!("bad number `{p}` in `{s}`"));
        match parts.as_slice() {
            ["constant", c] => Ok(TauForm::Constant { value: num(c)? }),
            ["step", f, lo, hi] => Ok(TauForm::Step {
                feature: f.parse().map_err(|_| format!("bad feature index `{f}`"))?,
                low: num(lo)?,
                high: num(hi)?,
            }),
            _ => Err(format!("expected constant:C or step:FEATURE:LOW:HIGH, got `{s}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n: usize,
    pub d_num: usize,
    pub d_cat: usize,
    pub seed: u64,
    pub tau_form: TauForm,
    pub confounding_strength: f64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n < 20 {
            return Err(DataError::Validation(format!("n = {} is below the minimum of 20", self.n)));
        }
        if self.d_num + self.d_cat == 0 {
            return Err(DataError::Validation("at least one feature is required".into()));
        }
        if !(self.confounding_strength >= 0.0 && self.confounding_strength.is_finite()) {
            return Err(DataError::Validation("confounding_strength must be finite and >= 0".into()));
        }
        if let TauForm::Step { feature, .. } = self.tau_form {
            if feature >= self.d_num + self.d_cat {
                return Err(DataError::Validation(format!("step feature {feature} does not exist")));
            }
        }
        Ok(())
    }
}

pub const PROPENSITY_FLOOR: f64 = 0.05;
pub const PROPENSITY_CEIL: f64 = 0.95;

/// Generates a dataset with known potential-outcome means.
///
/// Numeric features `x0..` are standard normal, binary features follow
/// them and are Bernoulli(0.5) coded 0/1. Treatment probability is the
/// logistic of `confounding_strength * x0`, clipped to [0.05, 0.95]. The
/// control surface is linear with coefficients drawn once from U(-1, 1);
/// the treated surface adds `tau(x)`; the factual outcome adds N(0, 1)
/// noise.
pub fn simulate(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let d = spec.d_num + spec.d_cat;
    let mut rng = seeds::rng(spec.seed);
    let coef = Uniform::new(-1.0, 1.0).expect("valid range");
    let beta: Vec<f64> = (0..d).map(|_| coef.sample(&mut rng)).collect();
    let coin = Bernoulli::new(0.5).expect("valid p");
    let mut cols = vec![Vec::with_capacity(spec.n); d];
    let (mut w, mut y, mut mu0, mut mu1) = (
        Vec::with_capacity(spec.n),
        Vec::with_capacity(spec.n),
        Vec::with_capacity(spec.n),
        Vec::with_capacity(spec.n),
    );
    for _ in 0..spec.n {
        let x: Vec<f64> = (0..d)
            .map(|j| {
                if j < spec.d_num {
                    rng.sample::<f64, _>(StandardNormal)
                } else if coin.sample(&mut rng) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let logit = spec.confounding_strength * x[0];
        let p = (1.0 / (1.0 + (-logit).exp())).clamp(PROPENSITY_FLOOR, PROPENSITY_CEIL);
        let wi = u8::from(rng.random::<f64>() < p);
        let m0: f64 = beta.iter().zip(&x).map(|(b, v)| b * v).sum();
        let tau = match spec.tau_form {
            TauForm::Constant { value } => value,
            TauForm::Step { feature, low, high } => {
                if x[feature] > 0.0 {
                    high
                } else {
                    low
                }
            }
        };
        let m1 = m0 + tau;
        let noise: f64 = rng.sample(StandardNormal);
        y.push(if wi == 1 { m1 } else { m0 } + noise);
        w.push(wi);
        mu0.push(m0);
        mu1.push(m1);
        for (c, v) in cols.iter_mut().zip(x) {
            c.push(v);
        }
    }
    let features = (0..d).map(|j| FeatureSpec::numeric(format!("x{j}"))).collect();
    let columns = cols.into_iter().map(Column::Numeric).collect();
    let x = Frame::new(Schema::new(features), columns)?;
    Dataset::new(x, w, y)?.with_potential_outcomes(mu0, mu1)
}

/// Positivity check shared by the model-fitting entry points.
pub fn require_positivity(ds: &Dataset, context: &str) -> Result<()> {
    if ds.has_positivity() {
        Ok(())
    } else {
        Err(DataError::Validation(format!("{context}: both treated and control rows are required")))
    }
}
