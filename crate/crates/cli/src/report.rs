//! Versioned output files: checkpoints, metric tables, histories.
//!
//! CSV files start with a `# <format> v<version>` line; read them with `#` as
//! the comment character.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use owa_rank::data::GroupThresholds;
use owa_rank::eval::Summary;
use owa_rank::model::{RelevanceModel, TrainConfig, TrainHistory};
use serde::{Deserialize, Serialize};

pub const CHECKPOINT_FORMAT: &str = "owa-rank-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const METRICS_FORMAT: &str = "owa-rank-metrics";
pub const METRICS_VERSION: u32 = 1;
pub const HISTORY_FORMAT: &str = "owa-rank-history";
pub const TIMING_FORMAT: &str = "owa-rank-timing";
pub const VIOLATIONS_FORMAT: &str = "owa-rank-violations";
pub const BENCHMARK_FORMAT: &str = "owa-rank-benchmark";
pub const RANKINGS_FORMAT: &str = "owa-rank-rankings";
/// Shared by every CSV schema above.
pub const TABLE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: RelevanceModel,
    pub thresholds: GroupThresholds,
    pub list_size: usize,
    pub train: TrainConfig,
    pub best_epoch: usize,
    /// Resolved configuration of the training run.
    pub config: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(
        model: RelevanceModel,
        thresholds: GroupThresholds,
        list_size: usize,
        train: TrainConfig,
        best_epoch: usize,
        config: BTreeMap<String, String>,
    ) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model,
            thresholds,
            list_size,
            train,
            best_epoch,
            config,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Tag {
            format: String,
            version: u32,
        }
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading checkpoint {}", path.display()))?;
        let tag: Tag = serde_json::from_str(&text)
            .with_context(|| format!("{} is not a checkpoint", path.display()))?;
        if tag.format != CHECKPOINT_FORMAT {
            bail!("{}: format {:?} is not {CHECKPOINT_FORMAT:?}", path.display(), tag.format);
        }
        if tag.version != CHECKPOINT_VERSION {
            bail!(
                "{}: checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                path.display(),
                tag.version
            );
        }
        Ok(serde_json::from_str(&text)?)
    }
}

/// One row per (lambda, seed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub lambda: f64,
    pub seed: u64,
    pub queries: usize,
    pub mean_dcg: f64,
    pub mean_violation: f64,
    pub mean_max_violation: f64,
    pub worst_violation: f64,
    pub mean_regret: f64,
    pub best_epoch: usize,
    pub iters_train: usize,
    pub iters_infer: usize,
}

pub const METRICS_COLUMNS: &[&str] = &[
    "lambda",
    "seed",
    "queries",
    "mean_dcg",
    "mean_violation",
    "mean_max_violation",
    "worst_violation",
    "mean_regret",
    "best_epoch",
    "iters_train",
    "iters_infer",
];

impl MetricsRow {
    pub fn new(lambda: f64, seed: u64, summary: &Summary, best_epoch: usize, iters: (usize, usize)) -> Self {
        Self {
            lambda,
            seed,
            queries: summary.queries,
            mean_dcg: summary.mean_dcg,
            mean_violation: summary.mean_violation,
            mean_max_violation: summary.mean_max_violation,
            worst_violation: summary.worst_violation,
            mean_regret: summary.mean_regret.unwrap_or(f64::NAN),
            best_epoch,
            iters_train: iters.0,
            iters_infer: iters.1,
        }
    }
}

/// Wall-clock costs, kept apart from the metrics so those stay reproducible.
#[derive(Debug, Clone, Serialize)]
pub struct TimingRow {
    pub lambda: f64,
    pub seed: u64,
    /// Empty for evaluate runs.
    pub train_ms_per_query: Option<f64>,
    pub infer_ms_per_query: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ViolationRow {
    pub lambda: f64,
    pub qid: String,
    pub group: usize,
    pub violation: f64,
    pub dcg: f64,
    pub regret: f64,
}

pub fn write_table<T: Serialize>(path: &Path, format: &str, rows: &[T]) -> Result<()> {
    let mut file = BufWriter::new(File::create(path)?);
    writeln!(file, "# {format} v{TABLE_VERSION}")?;
    let mut w = csv::Writer::from_writer(file);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a table written by [`write_table`], checking its version line.
pub fn read_table<T: for<'de> Deserialize<'de>>(path: &Path, format: &str) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path)?;
    let first = text.lines().next().unwrap_or("");
    let expected = format!("# {format} v{TABLE_VERSION}");
    if first != expected {
        bail!("{}: expected header line {expected:?}, found {first:?}", path.display());
    }
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[derive(Serialize)]
struct MetricsJson<'a> {
    format: &'a str,
    version: u32,
    rows: &'a [MetricsRow],
}

/// `metrics.csv`, `metrics.json` and `summary.txt`.
pub fn write_metrics(dir: &Path, rows: &[MetricsRow]) -> Result<()> {
    if let Some(bad) = rows.iter().find(|r| {
        ![r.mean_dcg, r.mean_violation, r.mean_max_violation, r.worst_violation, r.mean_regret]
            .iter()
            .all(|v| v.is_finite())
    }) {
        bail!("non-finite metrics for lambda {} seed {}", bad.lambda, bad.seed);
    }
    write_table(&dir.join("metrics.csv"), METRICS_FORMAT, rows)?;
    let json = MetricsJson {
        format: METRICS_FORMAT,
        version: METRICS_VERSION,
        rows,
    };
    let mut text = serde_json::to_string_pretty(&json)?;
    text.push('\n');
    std::fs::write(dir.join("metrics.json"), text)?;
    std::fs::write(dir.join("summary.txt"), summary_text(rows))?;
    Ok(())
}

pub fn summary_text(rows: &[MetricsRow]) -> String {
    let mut s = format!(
        "{:>7} {:>6} {:>8} {:>10} {:>10} {:>10} {:>10}\n",
        "lambda", "seed", "queries", "dcg", "viol_mean", "viol_max", "regret"
    );
    for r in rows {
        s.push_str(&format!(
            "{:>7.3} {:>6} {:>8} {:>10.4} {:>10.5} {:>10.5} {:>10.5}\n",
            r.lambda, r.seed, r.queries, r.mean_dcg, r.mean_violation, r.mean_max_violation, r.mean_regret
        ));
    }
    s
}

pub fn write_history(path: &Path, history: &TrainHistory) -> Result<()> {
    write_table(path, HISTORY_FORMAT, &history.records)
}
