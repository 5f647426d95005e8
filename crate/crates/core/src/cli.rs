//! Command-line front end.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data or schema error,
//! 4 fit or runtime error.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::causal_tree::{TreeError, TreeParams};
use crate::crf::{fit_crf_ct, forest_average_cate, CrfConfig, CrfError, CrfModel};
use crate::data::{self, ColumnRoles, DataError, Dataset, SyntheticSpec, TauForm};
use crate::metrics::{self, MetricsReport, METRIC_NAMES};
use crate::rules::{self, ReportOptions, RuleError};
use crate::seeds;

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("fit error: {0}")]
    Fit(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Fit(_) => 4,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CrfError> for CliError {
    fn from(e: CrfError) -> Self {
        match e {
            CrfError::Config(m) => CliError::Config(m),
            CrfError::Data(d) => CliError::Data(d.to_string()),
            e @ (CrfError::Tree { source: TreeError::SchemaMismatch(_) | TreeError::UnseenLevel { .. }, .. }
            | CrfError::Final(TreeError::SchemaMismatch(_) | TreeError::UnseenLevel { .. })) => {
                CliError::Data(e.to_string())
            }
            e => CliError::Fit(e.to_string()),
        }
    }
}

impl From<RuleError> for CliError {
    fn from(e: RuleError) -> Self {
        CliError::Fit(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn write_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Fit(format!("cannot write {}: {e}", path.display()))
}

// ---------------------------------------------------------------------------
// Configuration

/// Settings shared by all commands, read from a JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub columns: ColumnRoles,
    pub crf: CrfConfig,
    /// Parameters of the final tree (and of the plain tree baseline).
    pub final_params: TreeParams,
    pub prune: bool,
    pub folds: usize,
    /// Treatment threshold of the policy-risk metric.
    pub lambda: f64,
    pub model: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub report: Option<PathBuf>,
    /// CSV with `train,test` columns listing repetition file pairs.
    pub manifest: Option<PathBuf>,
    pub methods: Vec<Method>,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: None,
            test: None,
            columns: ColumnRoles::default(),
            crf: CrfConfig::default(),
            final_params: TreeParams::default(),
            prune: true,
            folds: 5,
            lambda: 0.0,
            model: None,
            predictions: None,
            report: None,
            manifest: None,
            methods: vec![Method::CrfCt],
            sweep: SweepConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Causal rule forest with a final causal tree.
    #[value(name = "crf_ct")]
    CrfCt,
    /// Plain honest causal tree.
    Ct,
    /// Average of subsampled honest trees.
    Cf,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::CrfCt => "crf_ct",
            Method::Ct => "ct",
            Method::Cf => "cf",
        }
    }
}

/// Hyperparameter grids and data for the sweep command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Trees per layer (and forest size of the averaging baseline).
    pub trees: Vec<usize>,
    pub mtry: Vec<usize>,
    pub nodesize: Vec<usize>,
    pub repetitions: usize,
    pub methods: Vec<Method>,
    /// Synthetic data drawn per repetition when no manifest is given.
    pub data: SweepData,
    pub test_fraction: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            trees: Vec::new(),
            mtry: Vec::new(),
            nodesize: Vec::new(),
            repetitions: 1,
            methods: vec![Method::Cf, Method::CrfCt],
            data: SweepData::default(),
            test_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepData {
    pub n: usize,
    pub d_num: usize,
    pub d_cat: usize,
    pub tau_form: TauForm,
    pub confounding_strength: f64,
}

impl Default for SweepData {
    fn default() -> Self {
        SweepData {
            n: 1000,
            d_num: 10,
            d_cat: 0,
            tau_form: TauForm::Step { feature: 1, low: 1.0, high: 3.0 },
            confounding_strength: 0.5,
        }
    }
}

impl RunConfig {
    /// Parses a JSON config; errors name the offending key path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de)
            .map_err(|e| CliError::Config(format!("at `{}`: {}", e.path(), e.inner())))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.crf.validate().map_err(|e| CliError::Config(format!("crf: {e}")))?;
        self.final_params.validate().map_err(|e| CliError::Config(format!("final_params: {e}")))?;
        if self.prune && self.folds < 2 {
            return Err(CliError::Config("folds must be at least 2 when pruning".into()));
        }
        if !self.lambda.is_finite() {
            return Err(CliError::Config("lambda must be finite".into()));
        }
        if self.methods.is_empty() {
            return Err(CliError::Config("methods must not be empty".into()));
        }
        let s = &self.sweep;
        if s.repetitions == 0 {
            return Err(CliError::Config("sweep.repetitions must be at least 1".into()));
        }
        if s.mtry.contains(&0) || s.nodesize.contains(&0) || s.trees.contains(&0) {
            return Err(CliError::Config("sweep grid values must be at least 1".into()));
        }
        if !(s.test_fraction > 0.0 && s.test_fraction < 1.0) {
            return Err(CliError::Config("sweep.test_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }

    fn prune_folds(&self) -> Option<usize> {
        self.prune.then_some(self.folds)
    }
}

// ---------------------------------------------------------------------------
// Model files

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format_version: u32,
    pub fit_seed: u64,
    /// SHA-256 of the serialized `model` field.
    pub fingerprint: String,
    pub model: CrfModel,
}

fn fingerprint(model: &CrfModel) -> Result<String> {
    let bytes = serde_json::to_vec(model).map_err(|e| CliError::Fit(e.to_string()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl ModelFile {
    pub fn new(model: CrfModel) -> Result<Self> {
        Ok(ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            fit_seed: model.config.master_seed,
            fingerprint: fingerprint(&model)?,
            model,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec_pretty(self).map_err(|e| CliError::Fit(e.to_string()))?;
        v.push(b'\n');
        Ok(v)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<CrfModel> {
        let file: ModelFile =
            serde_json::from_slice(bytes).map_err(|e| CliError::Data(format!("unreadable model file: {e}")))?;
        if file.format_version != MODEL_FORMAT_VERSION {
            return Err(CliError::Data(format!("unsupported model format version {}", file.format_version)));
        }
        let mut model = file.model;
        if fingerprint(&model)? != file.fingerprint {
            return Err(CliError::Data("model fingerprint does not match its contents".into()));
        }
        model.restore().map_err(|e| CliError::Data(e.to_string()))?;
        Ok(model)
    }
}

pub fn save_model(model: &CrfModel, path: &Path) -> Result<()> {
    let bytes = ModelFile::new(model.clone())?.to_bytes()?;
    fs::write(path, bytes).map_err(|e| write_err(path, e))
}

pub fn load_model(path: &Path) -> Result<CrfModel> {
    let bytes = fs::read(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    ModelFile::from_bytes(&bytes)
}

// ---------------------------------------------------------------------------
// Output helpers

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| write_err(p, e)),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes()).map_err(|e| CliError::Fit(e.to_string()))
        }
    }
}

/// `row,tau_hat` CSV.
pub fn predictions_csv(tau_hat: &[f64]) -> String {
    let mut s = String::from("row,tau_hat\n");
    for (i, v) in tau_hat.iter().enumerate() {
        s.push_str(&format!("{i},{}\n", data::format_float(*v)));
    }
    s
}

/// Reads the `tau_hat` column of a predictions CSV.
pub fn read_predictions(path: &Path) -> Result<Vec<f64>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let header = rdr.headers().map_err(|e| CliError::Data(e.to_string()))?.clone();
    let col = header
        .iter()
        .position(|h| h == "tau_hat")
        .ok_or_else(|| CliError::Data(format!("{}: missing column `tau_hat`", path.display())))?;
    rdr.records()
        .enumerate()
        .map(|(i, r)| {
            let r = r.map_err(|e| CliError::Data(e.to_string()))?;
            r.get(col)
                .and_then(|v| v.trim().parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| CliError::Data(format!("{}: bad tau_hat on data row {}", path.display(), i + 1)))
        })
        .collect()
}

/// One line of an evaluation or sweep table.
#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub setting: Vec<(String, String)>,
    pub method: String,
    /// Repetition index, or `aggregate`.
    pub repetition: String,
    pub values: Vec<Option<f64>>,
    /// 95% half-widths on aggregate rows.
    pub half_widths: Vec<Option<f64>>,
}

pub fn table_csv(rows: &[TableRow]) -> String {
    let mut s = String::new();
    let setting_keys: Vec<&str> =
        rows.first().map_or(Vec::new(), |r| r.setting.iter().map(|(k, _)| k.as_str()).collect());
    let mut header: Vec<String> = setting_keys.iter().map(|k| k.to_string()).collect();
    header.extend(["method".to_string(), "repetition".to_string()]);
    for m in METRIC_NAMES {
        header.push(m.to_string());
        header.push(format!("{m}_ci"));
    }
    s.push_str(&header.join(","));
    s.push('\n');
    let cell = |v: &Option<f64>| v.map(data::format_float).unwrap_or_default();
    for r in rows {
        let mut cells: Vec<String> = r.setting.iter().map(|(_, v)| v.clone()).collect();
        cells.push(r.method.clone());
        cells.push(r.repetition.clone());
        for (v, h) in r.values.iter().zip(&r.half_widths) {
            cells.push(cell(v));
            cells.push(cell(h));
        }
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

fn report_row(setting: Vec<(String, String)>, method: &str, rep: usize, r: &MetricsReport) -> TableRow {
    TableRow {
        setting,
        method: method.to_string(),
        repetition: rep.to_string(),
        values: METRIC_NAMES.iter().map(|m| r.get(m)).collect(),
        half_widths: vec![None; METRIC_NAMES.len()],
    }
}

fn aggregate_row(setting: Vec<(String, String)>, method: &str, reports: &[MetricsReport]) -> TableRow {
    let agg = metrics::aggregate(reports);
    let find = |m: &str| agg.iter().find(|a| a.metric == m);
    TableRow {
        setting,
        method: method.to_string(),
        repetition: "aggregate".into(),
        values: METRIC_NAMES.iter().map(|m| find(m).map(|a| a.mean)).collect(),
        half_widths: METRIC_NAMES.iter().map(|m| find(m).map(|a| a.half_width)).collect(),
    }
}

// ---------------------------------------------------------------------------
// Fitting helpers

/// Fits `method` on `train` and predicts `test`.
fn fit_predict(cfg: &RunConfig, method: Method, train: &Dataset, test: &Dataset, seed: u64) -> Result<Vec<f64>> {
    let test_x = test.x.conform_to(train.schema())?;
    match method {
        Method::CrfCt | Method::Ct => {
            let mut crf = cfg.crf.clone();
            crf.master_seed = seed;
            if method == Method::Ct {
                crf.layers = 0;
            }
            let model = fit_crf_ct(train, &crf, &cfg.final_params, cfg.prune_folds())?;
            Ok(model.predict(&test_x)?)
        }
        Method::Cf => {
            let forest =
                forest_average_cate(train, cfg.crf.trees, &cfg.crf.tree_params, cfg.crf.subsample_fraction, seed)?;
            Ok(forest.predict(&test_x)?)
        }
    }
}

fn load_dataset(path: &Path, roles: &ColumnRoles) -> Result<Dataset> {
    data::load_csv(path, roles, None).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Train/test pairs listed in a manifest, resolved relative to it.
pub fn read_manifest(path: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let header = rdr.headers().map_err(|e| CliError::Data(e.to_string()))?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Data(format!("{}: missing column `{name}`", path.display())))
    };
    let (ct, ce) = (col("train")?, col("test")?);
    let base = path.parent().unwrap_or(Path::new("."));
    let mut pairs = Vec::new();
    for r in rdr.records() {
        let r = r.map_err(|e| CliError::Data(e.to_string()))?;
        pairs.push((base.join(&r[ct]), base.join(&r[ce])));
    }
    if pairs.is_empty() {
        return Err(CliError::Data(format!("{}: manifest lists no repetitions", path.display())));
    }
    Ok(pairs)
}

// ---------------------------------------------------------------------------
// Commands

#[derive(Debug, Parser)]
#[command(name = "crf", version, about = "Causal rule forests: fit, predict, evaluate and explain")]
pub struct Cli {
    /// Worker threads for tree fitting (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model and write it to a model file.
    Fit(FitArgs),
    /// Predict effects for the rows of a CSV file.
    Predict(PredictArgs),
    /// Evaluate a model, a predictions file, or a list of repetitions.
    Eval(EvalArgs),
    /// Print the rules of a model.
    Rules(RulesArgs),
    /// Write a synthetic dataset.
    Simulate(SimulateArgs),
    /// Export the leaf encodings of a dataset.
    Encode(EncodeArgs),
    /// Run a hyperparameter sweep.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.crf.master_seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Training CSV.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Output model file.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub trees: Option<usize>,
    /// Skip cross-validated pruning of the final tree.
    #[arg(long)]
    pub no_prune: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// CSV with the model's feature columns.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Dataset with treatment, outcome and optional ground-truth columns.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Evaluate a `row,tau_hat` predictions file instead of a model.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// CSV listing `train,test` pairs; fits and evaluates every pair.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Methods for the repetition mode.
    #[arg(long, value_delimiter = ',')]
    pub methods: Vec<Method>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// CSV table output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Debug, Args)]
pub struct RulesArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Report expanded rules without minimization.
    #[arg(long)]
    pub no_minimize: bool,
    #[arg(long, value_enum, default_value = "text")]
    pub format: Format,
    #[arg(long, default_value_t = rules::DEFAULT_MAX_TERMS)]
    pub max_terms: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 5)]
    pub d_num: usize,
    #[arg(long, default_value_t = 0)]
    pub d_cat: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `constant:C` or `step:FEATURE:LOW:HIGH`.
    #[arg(long, default_value = "step:0:1:3")]
    pub tau: TauForm,
    #[arg(long, default_value_t = 0.0)]
    pub confounding: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn cmd_fit(args: &FitArgs) -> Result<()> {
    let mut cfg = args.cfg.load()?;
    if let Some(l) = args.layers {
        cfg.crf.layers = l;
    }
    if let Some(q) = args.trees {
        cfg.crf.trees = q;
    }
    if args.no_prune {
        cfg.prune = false;
    }
    if let Some(p) = &args.train {
        cfg.train = Some(p.clone());
    }
    if let Some(p) = &args.model {
        cfg.model = Some(p.clone());
    }
    cfg.validate()?;
    let train = cfg.train.as_ref().ok_or_else(|| CliError::Config("no training data (`train`)".into()))?;
    let out = cfg.model.clone().ok_or_else(|| CliError::Config("no model output path (`model`)".into()))?;
    let ds = load_dataset(train, &cfg.columns)?;
    let start = Instant::now();
    let model = fit_crf_ct(&ds, &cfg.crf, &cfg.final_params, cfg.prune_folds())?;
    let elapsed = start.elapsed();
    save_model(&model, &out)?;
    println!(
        "fitted {} layer(s) x {} tree(s), {} layer leaves, final tree with {} leaves, {:.3}s",
        model.layers.len(),
        model.config.trees,
        model.leaf_count(),
        model.final_ct.leaf_count,
        elapsed.as_secs_f64()
    );
    println!("model written to {}", out.display());
    Ok(())
}

fn load_features(model: &CrfModel, path: &Path) -> Result<data::Frame> {
    data::load_features_csv(path, &ColumnRoles::default(), Some(&model.raw_schema))
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let x = load_features(&model, &args.data)?;
    let tau = model.predict(&x)?;
    emit(args.out.as_deref(), &predictions_csv(&tau))
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let mut cfg = args.cfg.load()?;
    if let Some(l) = args.lambda {
        cfg.lambda = l;
    }
    if !args.methods.is_empty() {
        cfg.methods = args.methods.clone();
    }
    if let Some(m) = &args.manifest {
        cfg.manifest = Some(m.clone());
    }
    cfg.validate()?;
    let out = args.out.as_deref();
    if let Some(manifest) = &cfg.manifest {
        let rows = eval_repetitions(&cfg, &read_manifest(manifest)?)?;
        let table = table_csv(&rows);
        for r in rows.iter().filter(|r| r.repetition == "aggregate") {
            let mut line = format!("{}:", r.method);
            for ((m, v), h) in METRIC_NAMES.iter().zip(&r.values).zip(&r.half_widths) {
                if let (Some(v), Some(h)) = (v, h) {
                    line.push_str(&format!(" {m} = {v:.4} ± {h:.4}"));
                }
            }
            println!("{line}");
        }
        return emit(out, &table);
    }
    let data_path = args
        .data
        .as_ref()
        .or(cfg.test.as_ref())
        .ok_or_else(|| CliError::Config("no evaluation data (`--data`)".into()))?;
    let (tau_hat, ds, method) = if let Some(p) = &args.predictions {
        let ds = load_dataset(data_path, &cfg.columns)?;
        (read_predictions(p)?, ds, "predictions")
    } else {
        let model_path = args
            .model
            .as_ref()
            .or(cfg.model.as_ref())
            .ok_or_else(|| CliError::Config("need `--model` or `--predictions`".into()))?;
        let model = load_model(model_path)?;
        let ds = data::load_csv(data_path, &cfg.columns, Some(&model.raw_schema))
            .map_err(|e| CliError::Data(format!("{}: {e}", data_path.display())))?;
        (model.predict(&ds.x)?, ds, "model")
    };
    let report = metrics::evaluate(&tau_hat, &ds, cfg.lambda).map_err(|e| CliError::Data(e.to_string()))?;
    print!("{}", report.render());
    if let Some(p) = out {
        emit(Some(p), &table_csv(&[report_row(Vec::new(), method, 0, &report)]))?;
    }
    Ok(())
}

/// Fits and evaluates every method on every manifest pair.
pub fn eval_repetitions(cfg: &RunConfig, pairs: &[(PathBuf, PathBuf)]) -> Result<Vec<TableRow>> {
    let results = pairs
        .par_iter()
        .enumerate()
        .map(|(rep, (train_p, test_p))| {
            let train = load_dataset(train_p, &cfg.columns)?;
            let test = load_dataset(test_p, &cfg.columns)?;
            let seed = seeds::mix(cfg.crf.master_seed, rep as u64);
            cfg.methods
                .iter()
                .map(|&m| {
                    let tau = fit_predict(cfg, m, &train, &test, seed)
                        .map_err(|e| with_context(e, &format!("repetition {rep}")))?;
                    metrics::evaluate(&tau, &test, cfg.lambda).map_err(|e| CliError::Data(e.to_string()))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (mi, m) in cfg.methods.iter().enumerate() {
        let reports: Vec<MetricsReport> = results.iter().map(|r| r[mi].clone()).collect();
        for (rep, r) in reports.iter().enumerate() {
            rows.push(report_row(Vec::new(), m.label(), rep, r));
        }
        rows.push(aggregate_row(Vec::new(), m.label(), &reports));
    }
    Ok(rows)
}

fn with_context(e: CliError, ctx: &str) -> CliError {
    match e {
        CliError::Config(m) => CliError::Config(format!("{ctx}: {m}")),
        CliError::Data(m) => CliError::Data(format!("{ctx}: {m}")),
        CliError::Fit(m) => CliError::Fit(format!("{ctx}: {m}")),
    }
}

#[derive(Serialize)]
struct RulesDocument<'a> {
    fingerprint: String,
    rules: &'a [rules::RuleRecord],
}

/// Text or JSON rule report for a model.
pub fn rules_output(model: &CrfModel, opts: &ReportOptions, format: Format) -> Result<String> {
    let report = rules::rules_report(model, opts)?;
    Ok(match format {
        Format::Text => rules::render_report(model, &report),
        Format::Json => {
            let records = rules::report_records(model, &report);
            let doc = RulesDocument { fingerprint: fingerprint(model)?, rules: &records };
            let mut s = serde_json::to_string_pretty(&doc).map_err(|e| CliError::Fit(e.to_string()))?;
            s.push('\n');
            s
        }
    })
}

pub fn cmd_rules(args: &RulesArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let opts = ReportOptions { minimize: !args.no_minimize, top_k: args.top_k, max_terms: args.max_terms };
    emit(args.out.as_deref(), &rules_output(&model, &opts, args.format)?)
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let spec = SyntheticSpec {
        n: args.n,
        d_num: args.d_num,
        d_cat: args.d_cat,
        seed: args.seed,
        tau_form: args.tau,
        confounding_strength: args.confounding,
    };
    spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let ds = data::simulate(&spec)?;
    emit(args.out.as_deref(), &data::to_csv_string(&ds, &ColumnRoles::default()))
}

pub fn cmd_encode(args: &EncodeArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let roles = ColumnRoles::default();
    let ds = data::load_csv(&args.data, &roles, Some(&model.raw_schema))
        .map_err(|e| CliError::Data(format!("{}: {e}", args.data.display())))?;
    let encoded = model.encode_dataset(&ds)?;
    emit(args.out.as_deref(), &data::to_csv_string(&encoded, &roles))
}

/// Runs every (setting, method, repetition) cell of the sweep grid.
pub fn run_sweep(cfg: &RunConfig) -> Result<Vec<TableRow>> {
    let s = &cfg.sweep;
    let or_default = |grid: &Vec<usize>, d: usize| if grid.is_empty() { vec![d] } else { grid.clone() };
    let trees = or_default(&s.trees, cfg.crf.trees);
    let mtry = or_default(&s.mtry, cfg.crf.tree_params.mtry.unwrap_or(1));
    let nodesize = or_default(&s.nodesize, cfg.crf.tree_params.nodesize);
    let pairs: Vec<(Dataset, Dataset)> = match &cfg.manifest {
        Some(m) => read_manifest(m)?
            .iter()
            .map(|(a, b)| Ok((load_dataset(a, &cfg.columns)?, load_dataset(b, &cfg.columns)?)))
            .collect::<Result<_>>()?,
        None => (0..s.repetitions)
            .map(|rep| {
                let seed = seeds::mix(cfg.crf.master_seed, rep as u64);
                let ds = data::simulate(&SyntheticSpec {
                    n: s.data.n,
                    d_num: s.data.d_num,
                    d_cat: s.data.d_cat,
                    seed,
                    tau_form: s.data.tau_form,
                    confounding_strength: s.data.confounding_strength,
                })
                .map_err(|e| CliError::Config(format!("sweep.data: {e}")))?;
                Ok(data::honest_split(&ds, 1.0 - s.test_fraction, seeds::mix(seed, seeds::STREAM_SPLIT))?)
            })
            .collect::<Result<_>>()?,
    };
    let mut settings = Vec::new();
    for &q in &trees {
        for &m in &mtry {
            for &ns in &nodesize {
                settings.push((q, m, ns));
            }
        }
    }
    let mut cells = Vec::new();
    for (si, _) in settings.iter().enumerate() {
        for (mi, _) in s.methods.iter().enumerate() {
            for rep in 0..pairs.len() {
                cells.push((si, mi, rep));
            }
        }
    }
    let reports = cells
        .par_iter()
        .map(|&(si, mi, rep)| {
            let (q, m, ns) = settings[si];
            let mut c = cfg.clone();
            c.crf.trees = q;
            c.crf.tree_params.mtry = Some(m);
            c.crf.tree_params.nodesize = ns;
            let (train, test) = &pairs[rep];
            let seed = seeds::mix(cfg.crf.master_seed, rep as u64);
            let tau = fit_predict(&c, s.methods[mi], train, test, seed)
                .map_err(|e| with_context(e, &format!("trees={q} mtry={m} nodesize={ns} repetition {rep}")))?;
            metrics::evaluate(&tau, test, cfg.lambda).map_err(|e| CliError::Data(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut idx = 0;
    for &(q, m, ns) in &settings {
        let setting = vec![
            ("trees".to_string(), q.to_string()),
            ("mtry".into(), m.to_string()),
            ("nodesize".into(), ns.to_string()),
        ];
        for method in &s.methods {
            let chunk = &reports[idx..idx + pairs.len()];
            idx += pairs.len();
            for (rep, r) in chunk.iter().enumerate() {
                rows.push(report_row(setting.clone(), method.label(), rep, r));
            }
            rows.push(aggregate_row(setting.clone(), method.label(), chunk));
        }
    }
    Ok(rows)
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let cfg = args.cfg.load()?;
    cfg.validate()?;
    let rows = run_sweep(&cfg)?;
    emit(args.out.as_deref(), &table_csv(&rows))
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Rules(a) => cmd_rules(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Encode(a) => cmd_encode(a),
        Command::Sweep(a) => cmd_sweep(a),
    }
}

/// Parses arguments, runs the command and maps errors to exit codes.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.threads {
        Some(t) => match rayon::ThreadPoolBuilder::new().num_threads(t).build() {
            Ok(pool) => pool.install(|| run(&cli)),
            Err(e) => Err(CliError::Config(format!("threads: {e}"))),
        },
        None => run(&cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
