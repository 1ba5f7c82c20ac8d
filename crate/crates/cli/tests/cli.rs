//! Runs the `owa-rank` binary end to end on small synthetic inputs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use owa_rank::policy::{argsort_perm, fairness_violations, position_bias, RankingPolicy};
use owa_rank_cli::report::{read_table, Checkpoint, MetricsRow, METRICS_COLUMNS, METRICS_FORMAT};
use serde_json::Value;

fn owa_rank(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_owa-rank"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = owa_rank(args);
    assert!(
        out.status.success(),
        "owa-rank {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const FAST: &[&str] = &[
    "--list-size", "8", "--iters-train", "20", "--iters-infer", "60", "--lr", "0.01",
    "--batch-size", "8", "--epochs", "3",
];

/// Synthetic LETOR file with 40 queries of 8 items and 5 features.
fn synth(dir: &Path) -> PathBuf {
    let out = dir.join("syn");
    ok(&["synthesize", "--out", s(&out), "--queries", "40", "--list-size", "8", "--features", "5", "--seed", "3"]);
    out.join("data.txt")
}

fn train(dir: &Path, data: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(name);
    let mut args = vec!["train", "--data", s(data), "--out", s(&out)];
    args.extend_from_slice(FAST);
    args.extend_from_slice(extra);
    ok(&args);
    out
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn missing_data_is_a_usage_error_naming_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let out = owa_rank(&["train", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--data"));

    let out = owa_rank(&["train", "--data", s(&dir.path().join("absent.txt"))]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(owa_rank(&["train", "--lambda"]).status.code(), Some(2));
}

#[test]
fn invalid_values_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    for bad in [["--lambda", "1.5"], ["--lr", "abc"], ["--group-feature", "9"]] {
        let mut args = vec!["train", "--data", s(&data), "--out", s(dir.path())];
        args.extend_from_slice(FAST);
        args.extend_from_slice(&bad);
        let out = owa_rank(&args);
        assert_eq!(out.status.code(), Some(2), "{bad:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn train_writes_artifacts_and_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let a = train(dir.path(), &data, "a", &["--seed", "5"]);
    let b = train(dir.path(), &data, "b", &["--seed", "5"]);
    for f in ["checkpoint.json", "history.csv", "config.txt"] {
        assert!(a.join(f).is_file(), "missing {f}");
    }
    assert_eq!(read(&a.join("history.csv")), read(&b.join("history.csv")));

    // the emitted config alone reproduces the run
    let c = dir.path().join("c");
    ok(&["train", "--config", s(&a.join("config.txt")), "--out", s(&c)]);
    assert_eq!(read(&a.join("history.csv")), read(&c.join("history.csv")));
    let history = read(&a.join("history.csv"));
    assert!(history.starts_with("# owa-rank-history v1\nepoch,train_loss,valid_regret,"));
    assert_eq!(history.lines().count(), 2 + 4);
}

#[test]
fn evaluate_report_schema() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let run = train(dir.path(), &data, "run", &[]);
    let ev = dir.path().join("ev");
    ok(&["evaluate", "--checkpoint", s(&run.join("checkpoint.json")), "--data", s(&data), "--out", s(&ev), "--per-query"]);

    let csv = read(&ev.join("metrics.csv"));
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("# owa-rank-metrics v1"));
    assert_eq!(
        lines.next(),
        Some("lambda,seed,queries,mean_dcg,mean_violation,mean_max_violation,worst_violation,mean_regret,best_epoch,iters_train,iters_infer")
    );
    assert_eq!(METRICS_COLUMNS.join(","), csv.lines().nth(1).unwrap());
    let rows: Vec<MetricsRow> = read_table(&ev.join("metrics.csv"), METRICS_FORMAT).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].queries, 4);
    assert_eq!((rows[0].iters_train, rows[0].iters_infer), (20, 60));

    let json: Value = serde_json::from_str(&read(&ev.join("metrics.json"))).unwrap();
    assert_eq!(json["format"], "owa-rank-metrics");
    assert_eq!(json["version"], 1);
    assert_eq!(json["rows"][0]["mean_dcg"].as_f64(), Some(rows[0].mean_dcg));
    assert!(read(&ev.join("summary.txt")).contains("lambda"));
    assert!(read(&ev.join("timing.csv")).starts_with("# owa-rank-timing v1\nlambda,seed,train_ms_per_query,infer_ms_per_query\n"));
    let violations = read(&ev.join("violations.csv"));
    assert!(violations.starts_with("# owa-rank-violations v1\nlambda,qid,group,violation,dcg,regret\n"));
    assert!(violations.lines().count() >= 2 + 4);
}

#[test]
fn lambda_zero_evaluation_matches_argsort_of_model_scores() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let run = train(dir.path(), &data, "run", &["--lambda", "0"]);
    let ev = dir.path().join("ev");
    ok(&["evaluate", "--checkpoint", s(&run.join("checkpoint.json")), "--data", s(&data), "--out", s(&ev), "--part", "all", "--per-query"]);

    let ckpt = Checkpoint::load(&run.join("checkpoint.json")).unwrap();
    let records = owa_rank::data::parse_letor(std::fs::File::open(&data).unwrap()).unwrap();
    let bias = position_bias(8).unwrap();
    let mut expected = Vec::new();
    for r in &records {
        let groups = ckpt.thresholds.assign(&r.features).unwrap();
        let policy = RankingPolicy::deterministic(argsort_perm(&ckpt.model.scores(&r.features).unwrap())).unwrap();
        expected.extend(fairness_violations(&policy, &groups, &bias).unwrap());
    }
    let text = read(&ev.join("violations.csv"));
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let found: Vec<f64> = reader
        .records()
        .map(|r| r.unwrap()[3].parse().unwrap())
        .collect();
    assert_eq!(found.len(), expected.len());
    for (f, e) in found.iter().zip(&expected) {
        assert!((f - e).abs() <= 1e-12, "{f} vs {e}");
    }
}

/// Groups split every list evenly, so exposure parity is the fair optimum.
fn balanced_letor(path: &Path) {
    let mut text = String::new();
    for q in 0..30 {
        for i in 0..10 {
            let x = ((q * 7 + i * 3) % 11) as f64 / 11.0;
            let label = (x * 4.0).round();
            text.push_str(&format!("{label} qid:{q} 1:{} 2:{x} 3:{}\n", i % 2, 1.0 - x * x));
        }
    }
    std::fs::write(path, text).unwrap();
}

#[test]
fn lambda_one_evaluation_is_nearly_fair() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("balanced.txt");
    balanced_letor(&data);
    let run = dir.path().join("run");
    ok(&["train", "--data", s(&data), "--out", s(&run), "--list-size", "10", "--lambda", "1", "--iters-train", "20", "--epochs", "1", "--lr", "0.01"]);
    let ev = dir.path().join("ev");
    ok(&["evaluate", "--checkpoint", s(&run.join("checkpoint.json")), "--data", s(&data), "--out", s(&ev), "--part", "all", "--iters-infer", "500"]);
    let rows: Vec<MetricsRow> = read_table(&ev.join("metrics.csv"), METRICS_FORMAT).unwrap();
    assert_eq!(rows[0].lambda, 1.0);
    assert!(rows[0].mean_max_violation <= 0.02, "{}", rows[0].mean_max_violation);
}

fn rankings(path: &Path) -> Vec<Value> {
    read(path)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn rank_samples_rankings() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let ckpt0 = train(dir.path(), &data, "zero", &["--lambda", "0"]).join("checkpoint.json");
    let out = dir.path().join("r0");
    ok(&["rank", "--checkpoint", s(&ckpt0), "--data", s(&data), "--out", s(&out)]);
    let lines = rankings(&out.join("rankings.jsonl"));
    assert_eq!(lines[0]["format"], "owa-rank-rankings");
    assert_eq!(lines.len(), 41);
    let ckpt = Checkpoint::load(&ckpt0).unwrap();
    let records = owa_rank::data::parse_letor(std::fs::File::open(&data).unwrap()).unwrap();
    for (rec, line) in records.iter().zip(&lines[1..]) {
        let order = argsort_perm(&ckpt.model.scores(&rec.features).unwrap());
        let sampled: Vec<usize> = serde_json::from_value(line["rankings"][0].clone()).unwrap();
        assert_eq!(sampled, order.order());
    }

    let ckpt_fair = train(dir.path(), &data, "fair", &["--lambda", "0.7"]).join("checkpoint.json");
    let sample = |seed: &str, name: &str| {
        let out = dir.path().join(name);
        ok(&["rank", "--checkpoint", s(&ckpt_fair), "--data", s(&data), "--out", s(&out), "--samples", "20", "--seed", seed]);
        read(&out.join("rankings.jsonl"))
    };
    let (a, b, c) = (sample("1", "s1"), sample("1", "s1b"), sample("2", "s2"));
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn rank_exposures_match_policy() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let ckpt = train(dir.path(), &data, "fair", &["--lambda", "0.8"]).join("checkpoint.json");
    let few = dir.path().join("few.txt");
    let text: String = read(&data).lines().take(16).map(|l| format!("{l}\n")).collect();
    std::fs::write(&few, text).unwrap();
    let out = dir.path().join("r");
    let k = 10_000;
    ok(&["rank", "--checkpoint", s(&ckpt), "--data", s(&few), "--out", s(&out), "--samples", &k.to_string()]);
    let bias = position_bias(8).unwrap();
    for line in &rankings(&out.join("rankings.jsonl"))[1..] {
        let expected: Vec<f64> = serde_json::from_value(line["item_exposures"].clone()).unwrap();
        let samples: Vec<Vec<usize>> = serde_json::from_value(line["rankings"].clone()).unwrap();
        let mut sum = vec![0.0; 8];
        let mut sq = vec![0.0; 8];
        for ranking in &samples {
            for (pos, &item) in ranking.iter().enumerate() {
                let b = bias.as_slice()[pos];
                sum[item] += b;
                sq[item] += b * b;
            }
        }
        for i in 0..8 {
            let mean = sum[i] / k as f64;
            let var = (sq[i] / k as f64 - mean * mean).max(0.0);
            let sigma = (var / k as f64).sqrt();
            assert!((mean - expected[i]).abs() <= 3.0 * sigma + 1e-12, "item {i}: {mean} vs {}", expected[i]);
        }
    }
}

#[test]
fn benchmark_emits_declared_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("b");
    ok(&["benchmark", "--out", s(&out), "--sizes", "10,20", "--lambdas", "0,0.5", "--queries", "2", "--iters-train", "10", "--iters-infer", "20"]);
    let text = read(&out.join("benchmark.csv"));
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(
        header,
        [
            "n", "lambda", "groups", "queries", "iters_infer", "infer_ms_per_query",
            "infer_us_per_iter", "iters_train", "forward_ms_per_query", "backward_ms_per_query"
        ]
    );
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 4);
    for r in &rows {
        for v in r.iter() {
            assert!(v.parse::<f64>().unwrap().is_finite());
        }
    }
}

#[test]
fn inference_time_is_linear_in_iterations() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("b");
    ok(&["benchmark", "--out", s(&out), "--sizes", "100", "--lambdas", "0.5", "--queries", "10", "--iters-train", "100", "--iters-infer", "500", "--workers", "1"]);
    let text = read(&out.join("benchmark.csv"));
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let row = reader.records().next().unwrap().unwrap();
    let infer: f64 = row[5].parse().unwrap();
    let forward: f64 = row[8].parse().unwrap();
    let ratio = infer / forward;
    assert!((2.5..=7.5).contains(&ratio), "T=500 / T=100 time ratio {ratio}");
}

#[test]
fn sweep_grid_rows() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let out = dir.path().join("sw");
    let mut args = vec!["sweep", "--data", s(&data), "--out", s(&out), "--seeds", "1,2", "--groups", "5"];
    args.extend_from_slice(FAST);
    ok(&args);
    let rows: Vec<MetricsRow> = read_table(&out.join("metrics.csv"), METRICS_FORMAT).unwrap();
    assert_eq!(rows.len(), 10);
    let lambdas: Vec<f64> = rows.iter().map(|r| r.lambda).collect();
    assert_eq!(lambdas, [0.0, 0.0, 0.25, 0.25, 0.5, 0.5, 0.75, 0.75, 1.0, 1.0]);
    assert!(rows.iter().all(|r| r.mean_dcg.is_finite() && r.mean_violation.is_finite()));
    let frontier = read(&out.join("frontier.csv"));
    assert_eq!(frontier.lines().count(), 2 + 5);
    assert_eq!(std::fs::read_dir(out.join("histories")).unwrap().count(), 10);
}

#[test]
fn checkpoint_with_unknown_version_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let run = train(dir.path(), &data, "run", &[]);
    let text = read(&run.join("checkpoint.json")).replacen("\"version\": 1", "\"version\": 7", 1);
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, text).unwrap();
    let out = owa_rank(&["evaluate", "--checkpoint", s(&bad), "--data", s(&data), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("version 7"));
}
