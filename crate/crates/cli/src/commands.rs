//! Subcommand bodies. Each receives a fully resolved configuration whose
//! echo has already been written to `<out>/config.txt`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use owa_rank::data::{
    normalize_lists, parse_letor, parse_letor_with_dim, split, synthesize_records, write_letor,
    Dataset, GroupThresholds, RawQuery, SynthSpec,
};
use owa_rank::eval::{evaluate, summarize};
use owa_rank::fw::{solve, FwConfig, LayerConfig};
use owa_rank::model::{train, TrainConfig};
use owa_rank::policy::{position_bias, sample_ranking};
use owa_rank::spo::{precompute_targets_persistent, Problem, TargetCache};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::bench;
use crate::config::{usage, Cmd, RunConfig};
use crate::report::{
    write_history, write_metrics, write_table, Checkpoint, MetricsRow, TimingRow, ViolationRow,
    BENCHMARK_FORMAT, RANKINGS_FORMAT, TABLE_VERSION, TIMING_FORMAT, VIOLATIONS_FORMAT,
};

pub fn dispatch(cmd: Cmd, cfg: &RunConfig, checkpoint: Option<&Checkpoint>) -> Result<()> {
    let ckpt = || checkpoint.expect("loaded before dispatch");
    match cmd {
        Cmd::Train => cmd_train(cfg),
        Cmd::Evaluate => cmd_evaluate(cfg, ckpt()),
        Cmd::Rank => cmd_rank(cfg, ckpt()),
        Cmd::Precompute => cmd_precompute(cfg),
        Cmd::Synthesize => cmd_synthesize(cfg),
        Cmd::Benchmark => cmd_benchmark(cfg),
        Cmd::Sweep => cmd_sweep(cfg),
    }
}

fn core_usage(e: owa_rank::Error) -> anyhow::Error {
    usage(e.to_string())
}

fn layer(cfg: &RunConfig, lambda: f64) -> Result<LayerConfig> {
    let layer = LayerConfig::new(lambda)
        .with_iters(cfg.get("iters-train")?, cfg.get("iters-infer")?)
        .with_beta0(cfg.get("beta0")?);
    layer.validate().map_err(core_usage)?;
    Ok(layer)
}

fn train_config(cfg: &RunConfig, layer: LayerConfig, seed: u64) -> Result<TrainConfig> {
    let mut t = TrainConfig::new(layer);
    t.epochs = cfg.get("epochs")?;
    t.batch_size = cfg.get("batch-size")?;
    t.adam.learning_rate = cfg.get("lr")?;
    t.hidden = match cfg.raw("hidden") {
        "auto" => None,
        _ => Some(cfg.get("hidden")?),
    };
    t.seed = seed;
    t.validate().map_err(core_usage)?;
    Ok(t)
}

fn fractions(cfg: &RunConfig) -> Result<[f64; 3]> {
    let v: Vec<f64> = cfg.list("split")?;
    v.try_into()
        .map_err(|_| usage("--split needs three comma-separated fractions"))
}

fn read_records(cfg: &RunConfig, dim: Option<usize>) -> Result<(PathBuf, Vec<RawQuery>)> {
    let path = cfg.input_path("data")?;
    let reader = BufReader::new(File::open(&path)?);
    let records = match dim {
        Some(d) => parse_letor_with_dim(reader, d).map_err(|e| {
            usage(format!(
                "{}: {e} (the checkpoint expects {d} features)",
                path.display()
            ))
        })?,
        None => parse_letor(reader).with_context(|| format!("parsing {}", path.display()))?,
    };
    if records.is_empty() {
        return Err(usage(format!("--data {}: no queries", path.display())));
    }
    Ok((path, records))
}

fn fixed_size_dataset(
    path: &Path,
    records: Vec<RawQuery>,
    thresholds: &GroupThresholds,
    n: usize,
) -> Result<Dataset> {
    let norm = normalize_lists(records, n).map_err(core_usage)?;
    eprintln!(
        "{}: {} queries of {n} items ({} truncated, {} dropped)",
        path.display(),
        norm.records.len(),
        norm.truncated,
        norm.dropped
    );
    let provenance = format!(
        "{} (groups: quantiles of feature {} at {:?})",
        path.display(),
        thresholds.feature + 1,
        thresholds.cuts
    );
    Ok(Dataset::from_records(norm.records, thresholds, provenance)?)
}

/// Parses `--data`, fits corpus thresholds and fixes list sizes.
fn load_corpus(cfg: &RunConfig) -> Result<(Dataset, GroupThresholds)> {
    let (path, records) = read_records(cfg, None)?;
    let feature: usize = cfg.get("group-feature")?;
    if feature == 0 {
        return Err(usage("--group-feature is 1-based"));
    }
    let thresholds =
        GroupThresholds::fit(&records, feature - 1, cfg.get("groups")?).map_err(core_usage)?;
    let dataset = fixed_size_dataset(&path, records, &thresholds, cfg.get("list-size")?)?;
    Ok((dataset, thresholds))
}

fn load_splits(cfg: &RunConfig) -> Result<(GroupThresholds, [Dataset; 3])> {
    let (dataset, thresholds) = load_corpus(cfg)?;
    let (tr, va, te) = split(&dataset, fractions(cfg)?, cfg.get("split-seed")?).map_err(core_usage)?;
    eprintln!("split: {} train, {} valid, {} test", tr.len(), va.len(), te.len());
    Ok((thresholds, [tr, va, te]))
}

fn ensure_targets(
    sets: &[&Dataset],
    layer: &LayerConfig,
    cache: &mut TargetCache,
    path: &Path,
) -> Result<()> {
    let biases: Vec<_> = sets.iter().map(|s| s.bias()).collect();
    let problems: Vec<Problem> = sets
        .iter()
        .zip(&biases)
        .flat_map(|(s, b)| s.samples.iter().map(move |q| q.problem(b)))
        .collect();
    let report = precompute_targets_persistent(&problems, layer, cache, path)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    eprintln!(
        "targets at lambda {}: {} loaded, {} computed",
        layer.lambda, report.loaded, report.computed
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let (thresholds, [tr, va, te]) = load_splits(cfg)?;
    let layer = layer(cfg, cfg.get("lambda")?)?;
    let tcfg = train_config(cfg, layer.clone(), cfg.get("seed")?)?;
    let mut cache = TargetCache::new();
    ensure_targets(&[&tr, &va, &te], &layer, &mut cache, &cfg.targets_path())?;

    let start = Instant::now();
    let (model, history) = train(&tr, &va, &tcfg, &cache)?;
    let seconds = start.elapsed().as_secs_f64();
    let out = cfg.out_dir();
    write_history(&out.join("history.csv"), &history)?;
    let best = &history.records[history.best_epoch];
    Checkpoint::new(
        model,
        thresholds,
        tr.list_size,
        tcfg,
        history.best_epoch,
        cfg.to_map(),
    )
    .save(&out.join("checkpoint.json"))?;
    eprintln!(
        "trained {} epochs in {seconds:.1}s; best epoch {} (valid regret {:.5}, dcg {:.4})",
        history.records.len() - 1,
        history.best_epoch,
        best.valid_regret,
        best.valid_dcg
    );
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<()> {
    let (path, records) = read_records(cfg, Some(ckpt.model.input_dim()))?;
    let dataset = fixed_size_dataset(&path, records, &ckpt.thresholds, cfg.get("list-size")?)?;
    let part = match cfg.raw("part") {
        "all" => dataset,
        name => {
            let (tr, va, te) =
                split(&dataset, fractions(cfg)?, cfg.get("split-seed")?).map_err(core_usage)?;
            match name {
                "train" => tr,
                "valid" => va,
                "test" => te,
                other => {
                    return Err(usage(format!(
                        "--part must be train, valid, test or all, got {other:?}"
                    )))
                }
            }
        }
    };
    let lambda: f64 = cfg.get("lambda")?;
    let layer = layer(cfg, lambda)?;
    let mut cache = TargetCache::new();
    ensure_targets(&[&part], &layer, &mut cache, &cfg.targets_path())?;

    let start = Instant::now();
    let metrics = evaluate(&ckpt.model, &part, &layer, Some(&cache))?;
    let infer_ms = start.elapsed().as_secs_f64() * 1e3 / part.len() as f64;
    let summary = summarize(&metrics);
    let seed = ckpt.train.seed;
    let row = MetricsRow::new(
        lambda,
        seed,
        &summary,
        ckpt.best_epoch,
        (layer.iters_train, layer.iters_infer),
    );
    let out = cfg.out_dir();
    write_metrics(&out, std::slice::from_ref(&row))?;
    write_table(
        &out.join("timing.csv"),
        TIMING_FORMAT,
        &[TimingRow {
            lambda,
            seed,
            train_ms_per_query: None,
            infer_ms_per_query: infer_ms,
        }],
    )?;
    if cfg.flag("per-query")? {
        let rows: Vec<ViolationRow> = metrics
            .iter()
            .zip(&part.samples)
            .flat_map(|(m, s)| {
                s.groups
                    .active_groups()
                    .iter()
                    .zip(&m.violations)
                    .map(move |(&g, &v)| ViolationRow {
                        lambda,
                        qid: m.qid.clone(),
                        group: g,
                        violation: v,
                        dcg: m.dcg,
                        regret: m.regret.unwrap_or(f64::NAN),
                    })
            })
            .collect();
        write_table(&out.join("violations.csv"), VIOLATIONS_FORMAT, &rows)?;
    }
    eprint!("{}", crate::report::summary_text(&[row]));
    Ok(())
}

#[derive(Serialize)]
struct RankRecord {
    qid: String,
    /// Active group ids, aligned with `group_exposures`.
    groups: Vec<usize>,
    group_exposures: Vec<f64>,
    item_exposures: Vec<f64>,
    /// Item indices (document order within the query), best position first.
    rankings: Vec<Vec<usize>>,
}

#[derive(Serialize)]
struct RankHeader {
    format: &'static str,
    version: u32,
    lambda: f64,
    samples: usize,
    seed: u64,
}

fn cmd_rank(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<()> {
    let (_, records) = read_records(cfg, Some(ckpt.model.input_dim()))?;
    let lambda: f64 = cfg.get("lambda")?;
    let fw = FwConfig::new(lambda, cfg.get("iters-infer")?).with_beta0(cfg.get("beta0")?);
    fw.validate().map_err(core_usage)?;
    let samples: usize = cfg.get("samples")?;
    let seed: u64 = cfg.get("seed")?;

    let lines = records
        .par_iter()
        .enumerate()
        .map(|(q, r)| -> Result<String> {
            let groups = ckpt.thresholds.assign(&r.features)?;
            let bias = position_bias(r.len())?;
            let scores = ckpt.model.scores(&r.features)?;
            let sol = solve(&scores, &groups, &bias, &fw)?;
            // one stream per query keeps samples independent of scheduling
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(q as u64);
            let rankings = (0..samples)
                .map(|_| Ok(sample_ranking(&sol.policy, &mut rng)?.order().to_vec()))
                .collect::<Result<_>>()?;
            Ok(serde_json::to_string(&RankRecord {
                qid: r.qid.clone(),
                groups: groups.active_groups().to_vec(),
                group_exposures: sol.group_exposures.clone(),
                item_exposures: sol.policy.item_exposures(&bias)?,
                rankings,
            })?)
        })
        .collect::<Result<Vec<_>>>()?;

    let path = cfg.out_dir().join("rankings.jsonl");
    let mut w = BufWriter::new(File::create(&path)?);
    let header = RankHeader {
        format: RANKINGS_FORMAT,
        version: TABLE_VERSION,
        lambda,
        samples,
        seed,
    };
    writeln!(w, "{}", serde_json::to_string(&header)?)?;
    for line in &lines {
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    eprintln!("wrote {} queries to {}", lines.len(), path.display());
    Ok(())
}

fn cmd_precompute(cfg: &RunConfig) -> Result<()> {
    let (dataset, _) = load_corpus(cfg)?;
    let mut cache = TargetCache::new();
    for lambda in cfg.list::<f64>("lambdas")? {
        ensure_targets(&[&dataset], &layer(cfg, lambda)?, &mut cache, &cfg.targets_path())?;
    }
    eprintln!("{} targets in {}", cache.len(), cfg.targets_path().display());
    Ok(())
}

fn cmd_synthesize(cfg: &RunConfig) -> Result<()> {
    let feature: usize = cfg.get("group-feature")?;
    if feature == 0 {
        return Err(usage("--group-feature is 1-based"));
    }
    let mut spec = SynthSpec::new(
        cfg.get("queries")?,
        cfg.get("list-size")?,
        cfg.get("features")?,
        2,
    )
    .with_noise(cfg.get("noise")?)
    .with_seed(cfg.get("seed")?)
    .with_signal(cfg.get("signal")?);
    spec.group_feature = feature - 1;
    let records = synthesize_records(&spec).map_err(core_usage)?;
    let path = cfg.out_dir().join("data.txt");
    let mut w = BufWriter::new(File::create(&path)?);
    write_letor(
        &mut w,
        records
            .iter()
            .map(|r| (r.qid.as_str(), r.relevance.as_slice(), &r.features)),
    )?;
    w.flush()?;
    eprintln!("wrote {} queries to {}", records.len(), path.display());
    Ok(())
}

fn cmd_benchmark(cfg: &RunConfig) -> Result<()> {
    let queries: usize = cfg.get("queries")?;
    let groups: usize = cfg.get("groups")?;
    let seed: u64 = cfg.get("seed")?;
    if queries == 0 || groups == 0 {
        return Err(usage("--queries and --groups must be positive"));
    }
    let mut rows = Vec::new();
    for n in cfg.list::<usize>("sizes")? {
        for lambda in cfg.list::<f64>("lambdas")? {
            let row = bench::measure(n, groups, &layer(cfg, lambda)?, queries, seed)?;
            eprintln!(
                "n={n:>4} lambda={lambda:<5} infer {:.3} ms/query, backward {:.3} ms/query",
                row.infer_ms_per_query, row.backward_ms_per_query
            );
            rows.push(row);
        }
    }
    write_table(&cfg.out_dir().join("benchmark.csv"), BENCHMARK_FORMAT, &rows)
}

/// Seed-averaged trade-off point.
#[derive(Debug, Clone, Serialize)]
struct FrontierRow {
    lambda: f64,
    seeds: usize,
    mean_dcg: f64,
    mean_violation: f64,
    mean_max_violation: f64,
    mean_regret: f64,
}

pub const FRONTIER_FORMAT: &str = "owa-rank-frontier";

fn cmd_sweep(cfg: &RunConfig) -> Result<()> {
    let (_, [tr, va, te]) = load_splits(cfg)?;
    let lambdas: Vec<f64> = cfg.list("lambdas")?;
    let seeds: Vec<u64> = cfg.list("seeds")?;
    let out = cfg.out_dir();
    let hist_dir = out.join("histories");
    std::fs::create_dir_all(&hist_dir)?;

    let mut cache = TargetCache::new();
    let layers = lambdas
        .iter()
        .map(|&l| layer(cfg, l))
        .collect::<Result<Vec<_>>>()?;
    for layer in &layers {
        ensure_targets(&[&tr, &va, &te], layer, &mut cache, &cfg.targets_path())?;
    }

    let mut rows = Vec::new();
    let mut timing = Vec::new();
    for layer in &layers {
        for &seed in &seeds {
            let tcfg = train_config(cfg, layer.clone(), seed)?;
            let start = Instant::now();
            let (model, history) = train(&tr, &va, &tcfg, &cache)?;
            let train_ms = start.elapsed().as_secs_f64() * 1e3 / (tcfg.epochs.max(1) * tr.len()) as f64;
            write_history(
                &hist_dir.join(format!("lambda-{}_seed-{seed}.csv", layer.lambda)),
                &history,
            )?;
            let start = Instant::now();
            let summary = summarize(&evaluate(&model, &te, layer, Some(&cache))?);
            let infer_ms = start.elapsed().as_secs_f64() * 1e3 / te.len() as f64;
            let row = MetricsRow::new(
                layer.lambda,
                seed,
                &summary,
                history.best_epoch,
                (layer.iters_train, layer.iters_infer),
            );
            eprintln!(
                "lambda {:<5} seed {seed}: dcg {:.4}, violation {:.5}, regret {:.5}",
                layer.lambda, row.mean_dcg, row.mean_violation, row.mean_regret
            );
            rows.push(row);
            timing.push(TimingRow {
                lambda: layer.lambda,
                seed,
                train_ms_per_query: Some(train_ms),
                infer_ms_per_query: infer_ms,
            });
        }
    }
    write_metrics(&out, &rows)?;
    write_table(&out.join("timing.csv"), TIMING_FORMAT, &timing)?;
    let frontier: Vec<FrontierRow> = rows
        .chunks(seeds.len())
        .map(|group| {
            let k = group.len() as f64;
            let avg = |f: fn(&MetricsRow) -> f64| group.iter().map(f).sum::<f64>() / k;
            FrontierRow {
                lambda: group[0].lambda,
                seeds: group.len(),
                mean_dcg: avg(|r| r.mean_dcg),
                mean_violation: avg(|r| r.mean_violation),
                mean_max_violation: avg(|r| r.mean_max_violation),
                mean_regret: avg(|r| r.mean_regret),
            }
        })
        .collect();
    write_table(&out.join("frontier.csv"), FRONTIER_FORMAT, &frontier)
}
