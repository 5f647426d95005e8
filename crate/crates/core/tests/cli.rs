use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use crf_core::cli::{load_model, read_predictions, run_sweep, Method, RunConfig};
use crf_core::data::{load_csv, load_features_csv, ColumnRoles, TauForm};
use crf_core::fit_crf_ct;
use crf_core::rules::{key_value, RuleRecord};
use tempfile::TempDir;

fn crf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crf")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = crf(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn simulate(dir: &Path, name: &str, n: usize, seed: u64, tau: &str) -> PathBuf {
    let path = dir.join(name);
    let (n, seed) = (n.to_string(), seed.to_string());
    ok(&[
        "simulate",
        "--n",
        &n,
        "--d-num",
        "4",
        "--seed",
        &seed,
        "--tau",
        tau,
        "--confounding",
        "0.5",
        "--out",
        p(&path),
    ]);
    path
}

const SMALL: &str = r#"{"crf": {"layers": 2, "trees": 6}, "folds": 3}"#;

fn config(dir: &Path, json: &str) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, json).unwrap();
    path
}

#[test]
fn simulate_writes_deterministic_files() {
    let dir = TempDir::new().unwrap();
    let a = simulate(dir.path(), "a.csv", 100, 3, "constant:2");
    let b = simulate(dir.path(), "b.csv", 100, 3, "constant:2");
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 101);
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    let ds = load_csv(&a, &ColumnRoles::default(), None).unwrap();
    let tau = ds.true_effects().unwrap();
    assert!((tau.iter().sum::<f64>() / 100.0 - 2.0).abs() < 1e-12);
}

#[test]
fn fit_round_trip_matches_in_memory_model() {
    let dir = TempDir::new().unwrap();
    let train = simulate(dir.path(), "train.csv", 800, 1, "step:1:1:3");
    let test = simulate(dir.path(), "test.csv", 1000, 2, "step:1:1:3");
    let cfg = config(dir.path(), SMALL);
    let model_path = dir.path().join("model.json");
    ok(&["fit", "--config", p(&cfg), "--train", p(&train), "--model", p(&model_path), "--seed", "5"]);

    let mut run = RunConfig::from_json(SMALL).unwrap();
    run.crf.master_seed = 5;
    let ds = load_csv(&train, &ColumnRoles::default(), None).unwrap();
    let in_memory = fit_crf_ct(&ds, &run.crf, &run.final_params, Some(run.folds)).unwrap();
    let loaded = load_model(&model_path).unwrap();
    let rows = load_features_csv(&test, &ColumnRoles::default(), Some(&loaded.raw_schema)).unwrap();
    let expected = in_memory.predict(&rows).unwrap();
    assert_eq!(loaded.predict(&rows).unwrap(), expected);

    let preds = dir.path().join("preds.csv");
    ok(&["predict", "--model", p(&model_path), "--data", p(&test), "--out", p(&preds)]);
    assert_eq!(read_predictions(&preds).unwrap(), expected);
    assert!(fs::read_to_string(&preds).unwrap().starts_with("row,tau_hat\n0,"));
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let dir = TempDir::new().unwrap();
    let train = simulate(dir.path(), "train.csv", 300, 1, "step:1:1:3");
    let model_path = dir.path().join("m.json");

    let bad = config(dir.path(), r#"{"crf": {"layers": -1}}"#);
    let out = crf(&["fit", "--config", p(&bad), "--train", p(&train), "--model", p(&model_path)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("crf.layers"));

    let missing = dir.path().join("nope.csv");
    let out = crf(&["fit", "--train", p(&missing), "--model", p(&model_path)]);
    assert_eq!(out.status.code(), Some(3));

    let cfg = config(dir.path(), r#"{"crf": {"layers": 1, "trees": 3}}"#);
    ok(&["fit", "--config", p(&cfg), "--train", p(&train), "--model", p(&model_path)]);
    let text = fs::read_to_string(&train).unwrap();
    let dropped: String = text
        .lines()
        .map(|l| l.split(',').enumerate().filter(|(i, _)| *i != 2).map(|(_, c)| c).collect::<Vec<_>>().join(","))
        .collect::<Vec<_>>()
        .join("\n");
    let short = dir.path().join("short.csv");
    fs::write(&short, dropped).unwrap();
    let out = crf(&["predict", "--model", p(&model_path), "--data", p(&short)]);
    assert_eq!(out.status.code(), Some(3));
    let dropped_name = text.lines().next().unwrap().split(',').nth(2).unwrap();
    assert!(String::from_utf8_lossy(&out.stderr).contains(dropped_name));

    let out = crf(&["fit", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn single_leaf_model_predicts_a_constant_and_one_true_rule() {
    let dir = TempDir::new().unwrap();
    let train = simulate(dir.path(), "train.csv", 300, 4, "constant:1");
    let cfg = config(dir.path(), r#"{"crf": {"layers": 0}, "final_params": {"max_depth": 0}, "prune": false}"#);
    let model_path = dir.path().join("m.json");
    ok(&["fit", "--config", p(&cfg), "--train", p(&train), "--model", p(&model_path)]);
    let preds = ok(&["predict", "--model", p(&model_path), "--data", p(&train)]);
    let values: Vec<&str> = preds.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(values.len(), 300);
    assert!(values.iter().all(|v| *v == values[0]));
    let rules = ok(&["rules", "--model", p(&model_path)]);
    assert!(rules.contains("IF TRUE THEN CATE = "), "{rules}");
}

#[test]
fn eval_reports_metrics_and_scores_oracle_predictions() {
    let dir = TempDir::new().unwrap();
    let train = simulate(dir.path(), "train.csv", 500, 1, "step:1:1:3");
    let test = simulate(dir.path(), "test.csv", 200, 2, "step:1:1:3");
    let cfg = config(dir.path(), r#"{"crf": {"layers": 1, "trees": 5}}"#);
    let model_path = dir.path().join("m.json");
    ok(&["fit", "--config", p(&cfg), "--train", p(&train), "--model", p(&model_path)]);
    let report = ok(&["eval", "--model", p(&model_path), "--data", p(&test)]);
    assert!(report.contains("pehe: ") && report.contains("eps_ate: "), "{report}");
    assert!(report.contains("eps_att: n/a"));

    let ds = load_csv(&test, &ColumnRoles::default(), None).unwrap();
    let oracle = dir.path().join("oracle.csv");
    fs::write(&oracle, crf_core::cli::predictions_csv(&ds.true_effects().unwrap())).unwrap();
    let report = ok(&["eval", "--predictions", p(&oracle), "--data", p(&test)]);
    assert!(report.lines().any(|l| l == "pehe: 0"), "{report}");
}

#[test]
fn repetition_mode_aggregates_every_pair() {
    let dir = TempDir::new().unwrap();
    let mut manifest = String::from("train,test\n");
    for rep in 0..5 {
        let a = simulate(dir.path(), &format!("train{rep}.csv"), 300, 10 + rep, "step:1:1:3");
        let b = simulate(dir.path(), &format!("test{rep}.csv"), 100, 20 + rep, "step:1:1:3");
        manifest.push_str(&format!(
            "{},{}\n",
            a.file_name().unwrap().to_str().unwrap(),
            b.file_name().unwrap().to_str().unwrap()
        ));
    }
    let manifest_path = dir.path().join("manifest.csv");
    fs::write(&manifest_path, manifest).unwrap();
    let cfg = config(dir.path(), r#"{"crf": {"layers": 1, "trees": 4}, "folds": 3}"#);
    let table = dir.path().join("table.csv");
    let stdout = ok(&["eval", "--config", p(&cfg), "--manifest", p(&manifest_path), "--out", p(&table)]);
    assert!(stdout.contains("crf_ct: pehe = "));
    let text = fs::read_to_string(&table).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 6);
    assert!(rows[..5].iter().enumerate().all(|(i, r)| r.starts_with(&format!("crf_ct,{i},"))));
    let agg: Vec<&str> = rows[5].split(',').collect();
    assert_eq!(&agg[..2], &["crf_ct", "aggregate"]);
    assert!(!agg[2].is_empty() && !agg[3].is_empty());
}

#[test]
fn rules_reports_agree_with_the_model() {
    let dir = TempDir::new().unwrap();
    let train = simulate(dir.path(), "train.csv", 1000, 6, "step:1:1:3");
    let cfg = config(dir.path(), r#"{"crf": {"layers": 1, "trees": 8, "tree_params": {"max_depth": 3}}, "folds": 3}"#);
    let model_path = dir.path().join("m.json");
    ok(&["fit", "--config", p(&cfg), "--train", p(&train), "--model", p(&model_path)]);

    let full = ok(&["rules", "--model", p(&model_path), "--format", "json", "--no-minimize"]);
    let min = ok(&["rules", "--model", p(&model_path), "--format", "json"]);
    let parse = |s: &str| -> Vec<RuleRecord> {
        serde_json::from_value(serde_json::from_str::<serde_json::Value>(s).unwrap()["rules"].clone()).unwrap()
    };
    let (full, min) = (parse(&full), parse(&min));
    for rec in &min {
        let unminimized = full.iter().find(|r| r.leaf == rec.leaf).unwrap();
        assert!(rec.terms_after <= unminimized.terms_after);
        assert!(rec.terms_after <= rec.terms_before && rec.literals_after <= rec.literals_before);
    }

    let model = load_model(&model_path).unwrap();
    let rows = crf_core::data::simulate(&crf_core::data::SyntheticSpec {
        n: 10_000,
        d_num: 4,
        d_cat: 0,
        seed: 99,
        tau_form: TauForm::Constant { value: 0.0 },
        confounding_strength: 0.0,
    })
    .unwrap()
    .x;
    let encodings = model.encode_all(&rows).unwrap();
    let leaves = model.final_ct.leaf_ids(encodings.last().unwrap()).unwrap();
    for rec in &min {
        let terms = rec.conjunctions();
        for (i, &leaf) in leaves.iter().enumerate() {
            let hit = terms.iter().any(|t| t.eval(&mut |k| key_value(&rows, &encodings, k, i)));
            assert_eq!(hit, leaf == rec.leaf, "leaf {} row {i}", rec.leaf);
        }
    }
}

#[test]
fn encode_exports_leaf_columns() {
    let dir = TempDir::new().unwrap();
    let train = simulate(dir.path(), "train.csv", 400, 2, "step:1:1:3");
    let cfg = config(dir.path(), r#"{"crf": {"layers": 2, "trees": 3}, "prune": false}"#);
    let model_path = dir.path().join("m.json");
    ok(&["fit", "--config", p(&cfg), "--train", p(&train), "--model", p(&model_path)]);
    let encoded = ok(&["encode", "--model", p(&model_path), "--data", p(&train)]);
    let header = encoded.lines().next().unwrap();
    assert!(header.starts_with("tree_2_0,tree_2_1,tree_2_2,"), "{header}");
    assert_eq!(encoded.lines().count(), 401);
}

#[test]
fn sweep_table_has_one_row_per_cell_plus_aggregates() {
    let dir = TempDir::new().unwrap();
    let cfg = config(
        dir.path(),
        r#"{"crf": {"layers": 1}, "folds": 3, "sweep": {"trees": [10, 50], "repetitions": 3, "data": {"n": 300, "d_num": 4}}}"#,
    );
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    ok(&["sweep", "--config", p(&cfg), "--out", p(&a)]);
    ok(&["--threads", "3", "sweep", "--config", p(&cfg), "--out", p(&b)]);
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.iter().filter(|r| !r.contains(",aggregate,")).count(), 12);
    assert_eq!(rows.iter().filter(|r| r.contains(",aggregate,")).count(), 4);
    assert!(text.starts_with("trees,mtry,nodesize,method,repetition,pehe,pehe_ci"));
}

#[test]
fn larger_forests_lower_sweep_error() {
    let mut wins = 0;
    for seed in 0..10 {
        let mut cfg = RunConfig::default();
        cfg.crf.master_seed = seed;
        cfg.sweep.trees = vec![1, 50];
        cfg.sweep.repetitions = 3;
        cfg.sweep.methods = vec![Method::Cf];
        cfg.sweep.data.n = 600;
        let rows = run_sweep(&cfg).unwrap();
        let agg: Vec<f64> = rows.iter().filter(|r| r.repetition == "aggregate").map(|r| r.values[0].unwrap()).collect();
        wins += usize::from(agg[1] <= agg[0]);
    }
    assert!(wins >= 7, "Q=50 won {wins}/10");
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let train = simulate(dir.path(), "train.csv", 600, 8, "step:1:1:3");
    let cfg = config(dir.path(), SMALL);
    let outputs = |threads: &str, tag: &str| {
        let m = dir.path().join(format!("m{tag}.json"));
        let pr = dir.path().join(format!("p{tag}.csv"));
        let ru = dir.path().join(format!("r{tag}.json"));
        ok(&["--threads", threads, "fit", "--config", p(&cfg), "--train", p(&train), "--model", p(&m), "--seed", "3"]);
        ok(&["predict", "--model", p(&m), "--data", p(&train), "--out", p(&pr)]);
        ok(&["rules", "--model", p(&m), "--format", "json", "--out", p(&ru)]);
        [m, pr, ru].map(|f| fs::read(f).unwrap())
    };
    assert_eq!(outputs("1", "a"), outputs("8", "b"));
}
